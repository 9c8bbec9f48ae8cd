"""Marginal causal odds ratios, risk differences and relative risks.

An extended structural mean model carries one causal parameter per
reference exposure level ``x``. Averaging the counterfactual predictions
``expit{m(X, Z, C; beta) - m(C; psi_x) (X - x)}`` over the sample gives
``P{Y(x) = 1}``; contrasts of two such means give the marginal effects.
Standard errors come from influence functions that propagate the
estimation of ``beta`` and every ``psi_x`` used.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Union

import numpy as np
from scipy import stats

from .data import Dataset
from .errors import FormulaError, MissingLevel, NoRoot, NoRootAtLevel, Nonconvergence
from .formula import ModelSpec, Term, build_design
from .glm import FitResult, fit_glm
from .iv import (
    SearchConfig,
    SMMProblem,
    _as_spec,
    _cov_terms,
    build_smm_problem,
    smm_stack,
    solve_psi,
)
from .links import ETA_CLAMP, expit, logit
from .results import Z_975, CausalFit
from .variance import ScoreBlock, ScoreStack, influence_matrix, influence_se, sandwich_cov

MODES = ("exact", "approximate")
DEFAULT_BINS = 50


# -- targets and contrasts ----------------------------------------------------


@dataclass(frozen=True)
class FixedLevel:
    """Everyone set to exposure ``x``."""

    x: float


@dataclass(frozen=True)
class ObservedPlusOne:
    """Everyone's exposure raised by one unit."""


@dataclass(frozen=True)
class ObservedTimes:
    """Everyone's exposure multiplied by ``factor``."""

    factor: float = 1.1


@dataclass(frozen=True)
class Observed:
    """The observed exposure; its mean is the sample outcome mean."""


Target = Union[FixedLevel, ObservedPlusOne, ObservedTimes, Observed]


@dataclass(frozen=True)
class FixedLevels:
    x0: float = 0.0
    x1: float = 1.0

    @property
    def targets(self):
        return FixedLevel(self.x0), FixedLevel(self.x1)

    def __str__(self):
        return f"fixed:{self.x0:g},{self.x1:g}"


@dataclass(frozen=True)
class AdditiveShift:
    shift: float = 1.0

    def __post_init__(self):
        if self.shift != 1.0:
            raise ValueError("only a unit additive shift is supported")

    @property
    def targets(self):
        return Observed(), ObservedPlusOne()

    def __str__(self):
        return "plus1"


@dataclass(frozen=True)
class MultiplicativeShift:
    factor: float = 1.1

    @property
    def targets(self):
        return Observed(), ObservedTimes(self.factor)

    def __str__(self):
        return f"times{self.factor:g}"


Contrast = Union[FixedLevels, AdditiveShift, MultiplicativeShift]


def parse_contrast(text: str) -> Contrast:
    """``fixed:x0,x1``, ``plus1`` or ``times<factor>``."""
    t = text.strip()
    if t == "plus1":
        return AdditiveShift()
    if t.startswith("times"):
        return MultiplicativeShift(float(t[5:] or 1.1))
    if t.startswith("fixed:"):
        a, b = t[6:].split(",")
        return FixedLevels(float(a), float(b))
    raise ValueError(f"cannot parse contrast {text!r}")


# -- level bookkeeping -----------------------------------------------------------


def target_values(target: Target, data: Dataset) -> np.ndarray | None:
    """Per-subject exposure level under ``target``; None for the observed exposure."""
    if isinstance(target, FixedLevel):
        return np.full(data.n, float(target.x))
    if isinstance(target, ObservedPlusOne):
        return data.x + 1.0
    if isinstance(target, ObservedTimes):
        return data.x * float(target.factor)
    if isinstance(target, Observed):
        return None
    raise TypeError(f"unknown target {target!r}")


def assign_levels(t: np.ndarray, bins: int = DEFAULT_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Representative reference levels and each subject's level index.

    Distinct values are used as they are when there are at most ``bins`` of
    them; otherwise subjects are grouped into ``bins`` quantile bins, each
    represented by its mean target level.
    """
    uniq, inv = np.unique(t, return_inverse=True)
    if uniq.size <= bins:
        return uniq, inv
    edges = np.quantile(t, np.linspace(0.0, 1.0, bins + 1))
    idx = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, bins - 1)
    used, idx = np.unique(idx, return_inverse=True)
    reps = np.array([t[idx == j].mean() for j in range(used.size)])
    return reps, idx


# -- extended structural mean model ----------------------------------------------


@dataclass(frozen=True, eq=False)
class ExtendedSMMFit:
    """Per-level causal parameters of an extended structural mean model.

    In approximate mode only ``psi_by_x[0.0]`` is estimated and reused at
    every level.
    """

    psi_by_x: Mapping[float, float | np.ndarray]
    assoc_fit: FitResult
    mode: str
    x_levels: tuple[float, ...]
    problem: SMMProblem = field(repr=False)
    bins: int = DEFAULT_BINS
    influence: Mapping[float, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def psi(self, level: float):
        if self.mode == "approximate":
            return self.psi_by_x[0.0]
        key = float(level)
        if key not in self.psi_by_x:
            raise MissingLevel(f"no causal parameter estimated at exposure level {key:g}")
        return self.psi_by_x[key]

    def psi_influence(self, level: float) -> tuple[np.ndarray, np.ndarray]:
        """Per-subject influence of ``(beta, psi_level)``: arrays (n, p) and (n, k)."""
        key = 0.0 if self.mode == "approximate" else float(level)
        if key not in self.influence:
            raise MissingLevel(f"no causal parameter estimated at exposure level {key:g}")
        return self.influence[key]


def extended_smm(
    data: Dataset,
    assoc_spec: ModelSpec | str | None = None,
    m_spec: ModelSpec | str | None = None,
    x_levels=(0.0, 1.0),
    mode: str = "exact",
    targets=(),
    search: SearchConfig = SearchConfig(),
    bins: int = DEFAULT_BINS,
    allow_uncongenial: bool = False,
) -> ExtendedSMMFit:
    """Solve the structural-mean-model equations at each reference level.

    Parameters
    ----------
    x_levels : sequence of float
        Reference exposure levels.
    mode : {"exact", "approximate"}
        ``approximate`` solves only at level 0 and reuses that root.
    targets : sequence of targets
        Extra targets whose (binned) levels are added to ``x_levels``.

    Raises
    ------
    NoRootAtLevel
        The estimating equation has no root at one of the levels.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    prob = build_smm_problem(data, assoc_spec, m_spec, None, None, allow_uncongenial)
    levels = {float(x) for x in x_levels}
    for tg in targets:
        t = target_values(tg, data)
        if t is not None:
            levels.update(float(v) for v in assign_levels(t, bins)[0])
    levels = tuple(sorted(levels))
    solve_at = (0.0,) if mode == "approximate" else levels
    psi_by_x = {}
    for lv in solve_at:
        try:
            psi_by_x[lv], _ = solve_psi(prob, search, lv)
        except NoRoot as exc:
            raise NoRootAtLevel(lv, exc.diagnostics) from exc
    p, k = prob.A.shape[1], prob.k
    infl = {}
    for lv, psi in psi_by_x.items():
        inf = influence_matrix(smm_stack(prob, psi, lv))
        infl[lv] = (inf[:, :p], inf[:, -k:])
    return ExtendedSMMFit(
        MappingProxyType(psi_by_x), prob.assoc_fit, mode, levels, prob, bins, MappingProxyType(infl)
    )


def _target_terms(fit: ExtendedSMMFit, data: Dataset, target: Target):
    """Per-subject ``h``, its level index and the representative levels."""
    prob = fit.problem
    t = target_values(target, data)
    if isinstance(target, FixedLevel):
        reps, idx = np.array([float(target.x)]), np.zeros(data.n, dtype=int)
    else:
        reps, idx = assign_levels(t, fit.bins)
    psis = np.array([np.atleast_1d(fit.psi(r)) for r in reps])  # (levels, k)
    shift = prob.M * (data.x - t)[:, None]
    lin = prob.lin()
    h = expit(lin - np.sum(shift * psis[idx], axis=1))
    return h, idx, reps, shift


def counterfactual_mean(fit: ExtendedSMMFit, data: Dataset, target: Target) -> float:
    """Sample average of the counterfactual predictions under ``target``."""
    if isinstance(target, Observed):
        return float(data.y.mean())
    h, *_ = _target_terms(fit, data, target)
    return float(h.mean())


def _mean_influence(fit: ExtendedSMMFit, data: Dataset, target: Target) -> tuple[float, np.ndarray]:
    if isinstance(target, Observed):
        mu = float(data.y.mean())
        return mu, data.y - mu
    prob = fit.problem
    h, idx, reps, shift = _target_terms(fit, data, target)
    mu = float(h.mean())
    hp = h * (1.0 - h)
    free = (np.abs(prob.offset + prob.A @ prob.assoc_fit.beta) < ETA_CLAMP).astype(float)
    g_beta = (prob.A * (hp * free)[:, None]).mean(axis=0)
    inf = h - mu
    if_beta = None
    grads = -(shift * hp[:, None])  # d h / d psi at the subject's own level
    if fit.mode == "approximate":
        if_beta, if_psi = fit.psi_influence(0.0)
        inf = inf + if_psi @ grads.mean(axis=0)
    else:
        for j, r in enumerate(reps):
            g = np.where((idx == j)[:, None], grads, 0.0).mean(axis=0)
            if_beta, if_psi = fit.psi_influence(r)
            inf = inf + if_psi @ g
    inf = inf + if_beta @ g_beta
    return mu, inf


@dataclass(frozen=True, eq=False)
class MarginalEffect:
    """Contrast of two counterfactual outcome means.

    ``log_or``, ``risk_diff`` and ``rel_risk`` are computed directly from
    ``mu_low`` and ``mu_high``; standard errors use the delta method on the
    two means' influence functions.
    """

    log_or: float
    risk_diff: float
    rel_risk: float
    mu_low: float
    mu_high: float
    se_log_or: float
    ci: tuple[float, float]
    contrast: Contrast
    se_risk_diff: float = np.nan
    se_log_rr: float = np.nan
    ci_risk_diff: tuple[float, float] = (np.nan, np.nan)
    ci_rel_risk: tuple[float, float] = (np.nan, np.nan)
    p_value: float = np.nan
    mode: str = "exact"
    influence: np.ndarray | None = field(default=None, repr=False)

    @property
    def odds_ratio(self) -> float:
        return float(np.exp(self.log_or))

    def to_dict(self) -> dict:
        from .results import _num

        return {
            "contrast": str(self.contrast),
            "mode": self.mode,
            "log_or": _num(self.log_or),
            "exp_log_or": _num(np.exp(self.log_or)),
            "se_log_or": _num(self.se_log_or),
            "ci": [_num(self.ci[0]), _num(self.ci[1])],
            "exp_ci": [_num(np.exp(self.ci[0])), _num(np.exp(self.ci[1]))],
            "p_value": _num(self.p_value),
            "risk_diff": _num(self.risk_diff),
            "se_risk_diff": _num(self.se_risk_diff),
            "ci_risk_diff": [_num(v) for v in self.ci_risk_diff],
            "rel_risk": _num(self.rel_risk),
            "se_log_rr": _num(self.se_log_rr),
            "ci_rel_risk": [_num(v) for v in self.ci_rel_risk],
            "mu_low": _num(self.mu_low),
            "mu_high": _num(self.mu_high),
        }


def marginal_contrast(fit: ExtendedSMMFit, data: Dataset, contrast: Contrast = FixedLevels()) -> MarginalEffect:
    """Marginal log odds ratio, risk difference and relative risk for ``contrast``."""
    low_t, high_t = contrast.targets
    mu0, if0 = _mean_influence(fit, data, low_t)
    mu1, if1 = _mean_influence(fit, data, high_t)
    log_or = float(logit(mu1) - logit(mu0))
    if_eta = if1 / (mu1 * (1.0 - mu1)) - if0 / (mu0 * (1.0 - mu0))
    se = influence_se(if_eta)
    rd = mu1 - mu0
    se_rd = influence_se(if1 - if0)
    log_rr = np.log(mu1) - np.log(mu0)
    se_rr = influence_se(if1 / mu1 - if0 / mu0)
    p = float(2.0 * stats.norm.sf(abs(log_or) / se)) if se > 0 else (1.0 if log_or == 0 else 0.0)
    return MarginalEffect(
        log_or=log_or,
        risk_diff=float(rd),
        rel_risk=float(mu1 / mu0),
        mu_low=mu0,
        mu_high=mu1,
        se_log_or=se,
        ci=(log_or - Z_975 * se, log_or + Z_975 * se),
        contrast=contrast,
        se_risk_diff=se_rd,
        se_log_rr=se_rr,
        ci_risk_diff=(rd - Z_975 * se_rd, rd + Z_975 * se_rd),
        ci_rel_risk=(float(np.exp(log_rr - Z_975 * se_rr)), float(np.exp(log_rr + Z_975 * se_rr))),
        p_value=p,
        mode=fit.mode,
        influence=np.column_stack([if0, if1]),
    )


# -- additive-confounding moment estimator ---------------------------------------------

GMM_MAX_ITER = 50
GMM_MIN_STEP = 2.0**-10
GMM_TOL = 1e-10


def _gmm_designs(data: Dataset, spec: ModelSpec | str | None):
    if spec is None:
        spec = ModelSpec((Term("intercept"), Term("main", ("x",)), *_cov_terms(data)), "logit", "y")
    spec = _as_spec(spec, spec, "logit")
    if not any(t.kind == "main" and t.names == ("x",) for t in spec.terms):
        raise FormulaError("mean model needs a main effect of x")
    if any("z" in t.names for t in spec.terms):
        raise FormulaError("the instrument enters only through the moment conditions")
    inst_terms = tuple(Term("main", ("z",)) if (t.kind == "main" and t.names == ("x",)) else t for t in spec.terms)
    if any("x" in t.names for t in inst_terms):
        raise FormulaError("x may appear only as a main effect")
    frame = data.frame()
    X = build_design(spec, frame)
    Zd = build_design(ModelSpec(inst_terms, "identity"), frame)
    return spec, X, Zd


def gmm_marginal(data: Dataset, spec: ModelSpec | str | None = None) -> CausalFit:
    """Moment estimator under an additive unmeasured confounder.

    Solves ``sum_i (1, Z_i, C_i)' {Y_i - expit(b0 + psi X_i + b1 C_i)} = 0``
    by damped Newton from the ordinary logistic fit. ``exp(psi)`` is a
    marginal causal odds ratio.

    Raises
    ------
    Nonconvergence
        After 50 iterations, or when step halving reaches 2^-10 without
        decreasing the moment norm. The error carries the iteration trace.
    """
    spec, Xd, Zd = _gmm_designs(data, spec)
    X, Z, off, y = Xd.matrix, Zd.matrix, Xd.offset, data.y
    beta = fit_glm(data, spec).beta.copy()

    def moments(b):
        return Z.T @ (y - expit(np.clip(off + X @ b, -ETA_CLAMP, ETA_CLAMP))) / data.n

    def jac(b):
        p = expit(np.clip(off + X @ b, -ETA_CLAMP, ETA_CLAMP))
        return -Z.T @ (X * (p * (1.0 - p))[:, None]) / data.n

    u = moments(beta)
    norm = float(np.max(np.abs(u)))
    trace = [{"iteration": 0, "norm": norm, "step": 1.0}]
    converged = norm < GMM_TOL
    for it in range(1, GMM_MAX_ITER + 1):
        if converged:
            break
        try:
            step = np.linalg.solve(jac(beta), -u)
        except np.linalg.LinAlgError as exc:
            raise Nonconvergence(f"singular moment Jacobian at iteration {it}", trace) from exc
        t = 1.0
        while True:
            cand = beta + t * step
            uc = moments(cand)
            nc = float(np.max(np.abs(uc)))
            if np.isfinite(nc) and nc < norm:
                break
            t *= 0.5
            if t < GMM_MIN_STEP:
                trace.append({"iteration": it, "norm": norm, "step": t})
                raise Nonconvergence(f"step halving failed at iteration {it} (moment norm {norm:.3g})", trace)
        beta, u, norm = cand, uc, nc
        trace.append({"iteration": it, "norm": norm, "step": t})
        converged = norm < GMM_TOL
    if not converged:
        raise Nonconvergence(f"no convergence in {GMM_MAX_ITER} iterations (moment norm {norm:.3g})", trace)
    if np.max(np.abs(off + X @ beta)) >= ETA_CLAMP:
        raise Nonconvergence("linear predictor diverged", trace)

    def scores(theta):
        return (y - expit(off + X @ theta))[:, None] * Z

    def sjac(theta, w):
        p = expit(off + X @ theta)
        return -Z.T @ (X * (w * p * (1.0 - p))[:, None])

    stack = ScoreStack((ScoreBlock("moments", Z.shape[1], scores, sjac),), beta, None, Xd.names)
    cov = sandwich_cov(stack)
    j = Xd.names.index("x")
    psi, se = float(beta[j]), float(np.sqrt(cov[j, j]))
    p = float(2.0 * stats.norm.sf(abs(psi) / se)) if se > 0 else (1.0 if psi == 0 else 0.0)
    return CausalFit(
        psi, se, psi - Z_975 * se, psi + Z_975 * se, p, "GMMMarginal",
        param_names=Xd.names, vcov=cov,
        extras={"scale": "marginal causal odds ratio", "iterations": len(trace) - 1},
    )
