"""Monte Carlo harness: repeated draws, estimator runs and summary moments."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..data import Dataset
from ..errors import IVOddsError
from ..formula import parse_formula
from ..iv import adjusted_iv, logistic_smm, standard_iv
from ..marginal import AdditiveShift, FixedLevels, ObservedPlusOne, extended_smm, gmm_marginal, marginal_contrast
from ..results import Z_975
from .dgp import DGPConfig, calibrate, generate, true_mlor

# outcome model fitted in every replicate; linear in the genotype count like
# the generating model, plus the exposure-instrument product in experiment e
SIM_ASSOC = parse_formula("y ~ x + z")
SIM_ASSOC_E = parse_formula("y ~ x + z + x:z")


def sim_assoc(config: DGPConfig):
    return SIM_ASSOC_E if config.experiment == "e" else SIM_ASSOC

CONDITIONAL = ("StandardIV", "AdjustedIV", "LogisticSMM")
MARGINAL = ("MLOR1", "MLOR1Approx", "MLOR2", "MLOR2Approx", "GMMMarginal")
SIM_ESTIMATORS = CONDITIONAL + MARGINAL


def _conditional(name, data, assoc):
    if name == "StandardIV":
        f = standard_iv(data)
    elif name == "AdjustedIV":
        f = adjusted_iv(data)
    else:
        f = logistic_smm(data, assoc, ci="wald", allow_uncongenial=True)
    return float(f.psi), float(f.se)


def _marginal(name, data, cache, want_shift, assoc):
    if name == "GMMMarginal":
        f = gmm_marginal(data)
        return float(f.psi), float(f.se)
    mode = "approximate" if name.endswith("Approx") else "exact"
    contrast = FixedLevels(0.0, 1.0) if name.startswith("MLOR1") else AdditiveShift()
    if mode not in cache:
        targets = (ObservedPlusOne(),) if (mode == "exact" and want_shift) else ()
        try:
            cache[mode] = extended_smm(data, assoc, None, (0.0, 1.0), mode, targets, allow_uncongenial=True)
        except IVOddsError as exc:
            cache[mode] = exc
    fit = cache[mode]
    if isinstance(fit, IVOddsError):
        raise fit
    e = marginal_contrast(fit, data, contrast)
    return e.log_or, e.se_log_or


def run_replicate(config: DGPConfig, replicate: int, estimators, assoc=None) -> dict[str, tuple[float, float] | str]:
    """Estimates ``(value, se)`` per estimator, or the error code on failure."""
    assoc = sim_assoc(config) if assoc is None else (parse_formula(assoc) if isinstance(assoc, str) else assoc)
    y, x, z = generate(config, replicate)
    data = Dataset(y, x, z)
    out = {}
    cache: dict = {}
    want_shift = any(e.startswith("MLOR2") for e in estimators)
    for name in estimators:
        try:
            if name in CONDITIONAL:
                out[name] = _conditional(name, data, assoc)
            elif name in MARGINAL:
                out[name] = _marginal(name, data, cache, want_shift, assoc)
            else:
                raise ValueError(f"unknown estimator {name!r}")
        except IVOddsError as exc:
            out[name] = exc.code
    return out


@dataclass(frozen=True)
class CellSummary:
    experiment: str
    target_ey: float
    psi_true: float
    estimator: str
    truth: float
    bias: float
    ese: float
    sse: float
    coverage: float
    n_fail: int
    n_ok: int
    mc_se_bias: float
    failures: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "target_ey": self.target_ey,
            "psi_true": self.psi_true,
            "estimator": self.estimator,
            "truth": self.truth,
            "bias": self.bias,
            "ese": self.ese,
            "sse": self.sse,
            "coverage": self.coverage,
            "n_fail": self.n_fail,
            "n_ok": self.n_ok,
            "mc_se_bias": self.mc_se_bias,
            "failures": dict(sorted(self.failures.items())),
        }


@dataclass(frozen=True)
class SimulationReport:
    """Per-cell bias, empirical SD (ESE), mean sandwich SE (SSE) and coverage."""

    cells: tuple[CellSummary, ...]
    reps: int
    seed: int
    configs: tuple[DGPConfig, ...] = ()
    estimates: dict = field(default_factory=dict, repr=False, compare=False)
    elapsed: float = field(default=0.0, compare=False)

    def cell(self, estimator: str, experiment: str | None = None) -> CellSummary:
        for c in self.cells:
            if c.estimator == estimator and (experiment is None or c.experiment == experiment):
                return c
        raise KeyError(estimator)


def summarize(estimates, ses, truth: float) -> tuple[float, float, float, float, float]:
    """``(bias, ese, sse, coverage, mc_se_bias)`` of successful replicates."""
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(ses, dtype=float)
    if est.size == 0:
        return (np.nan,) * 5
    bias = float(est.mean() - truth)
    ese = float(est.std(ddof=1)) if est.size > 1 else 0.0
    sse = float(se.mean())
    cover = float(np.mean(np.abs(est - truth) <= Z_975 * se))
    return bias, ese, sse, cover, ese / np.sqrt(est.size)


def truth_for(config: DGPConfig, estimator: str) -> float:
    if estimator in CONDITIONAL:
        return float(config.psi_true)
    if estimator.startswith("MLOR2"):
        return true_mlor(config, "plus1")
    return true_mlor(config, "fixed")


def run_experiment(
    config: DGPConfig,
    reps: int,
    estimators=("StandardIV", "AdjustedIV", "LogisticSMM"),
    assoc=None,
) -> SimulationReport:
    """Run ``reps`` replicates of one cell.

    ``assoc`` overrides the outcome model used by the structural-mean-model
    estimators (default ``y ~ x + z``, with ``x:z`` added in experiment e).

    Replicate ``r`` draws from the substream ``(config.seed, r)``, so results
    do not depend on which estimators are requested. Failed replicates are
    counted per estimator and left out of the moments.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    estimators = tuple(estimators)
    bad = [e for e in estimators if e not in SIM_ESTIMATORS]
    if bad:
        raise ValueError(f"unknown estimators {bad}; choose from {SIM_ESTIMATORS}")
    cfg = config if config.calibrated else calibrate(config)
    t0 = time.perf_counter()
    rows = [run_replicate(cfg, r, estimators, assoc) for r in range(reps)]
    elapsed = time.perf_counter() - t0
    cells = []
    estimates = {}
    for name in estimators:
        ok = [r[name] for r in rows if isinstance(r[name], tuple)]
        fails: dict[str, int] = {}
        for r in rows:
            if isinstance(r[name], str):
                fails[r[name]] = fails.get(r[name], 0) + 1
        truth = truth_for(cfg, name)
        est = [v for v, _ in ok]
        ses = [s for _, s in ok]
        bias, ese, sse, cover, mcse = summarize(est, ses, truth)
        estimates[name] = np.array(est)
        cells.append(
            CellSummary(
                cfg.experiment, cfg.target_ey, cfg.psi_true, name, truth, bias, ese, sse, cover,
                reps - len(ok), len(ok), mcse, fails,
            )
        )
    return SimulationReport(tuple(cells), reps, cfg.seed, (cfg,), estimates, elapsed)


def merge(reports) -> SimulationReport:
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to merge")
    return SimulationReport(
        tuple(c for r in reports for c in r.cells),
        reports[0].reps,
        reports[0].seed,
        tuple(c for r in reports for c in r.configs),
        {},
        sum(r.elapsed for r in reports),
    )
