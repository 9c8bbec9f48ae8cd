"""Causal odds ratios, risk differences and relative risks from instrumental variables."""

__version__ = "0.1.0"

from .data import CountTable2x2x2, Dataset, expand_table, ingest_csv, load_fixture, tabulate
from .errors import IVOddsError
from .formula import ModelSpec, parse_formula
from .glm import fit_glm
from .iv import (
    SearchConfig,
    adjusted_iv,
    closed_form_binary,
    estimating_curve,
    logistic_smm,
    probit_normal_smm,
    standard_iv,
    unadjusted_logistic,
    wald_ratio,
)
from .marginal import extended_smm, gmm_marginal, marginal_contrast, parse_contrast
from .results import CausalFit, RootDiagnostics

__all__ = [
    "CausalFit",
    "CountTable2x2x2",
    "Dataset",
    "IVOddsError",
    "ModelSpec",
    "RootDiagnostics",
    "SearchConfig",
    "adjusted_iv",
    "closed_form_binary",
    "estimating_curve",
    "expand_table",
    "extended_smm",
    "fit_glm",
    "gmm_marginal",
    "ingest_csv",
    "load_fixture",
    "logistic_smm",
    "marginal_contrast",
    "parse_contrast",
    "parse_formula",
    "probit_normal_smm",
    "standard_iv",
    "tabulate",
    "unadjusted_logistic",
    "wald_ratio",
]
