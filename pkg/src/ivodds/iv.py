"""Instrumental-variable estimators of the conditional causal log odds ratio.

Four routes are provided:

* two-stage (Wald-type) IV: logistic regression of the outcome on the
  first-stage fitted exposure;
* adjusted IV: the same with the first-stage residual added as a control
  function;
* logistic structural mean model (SMM): fit an association model for the
  outcome, then pick the causal parameter that makes the predicted
  counterfactual untreated outcome mean-independent of the instrument;
* probit-normal SMM: a closed-form ratio under a probit link and a normal
  exposure.

The binary-exposure, binary-instrument SMM also has a quadratic closed form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize, stats

from . import _kernels
from .data import CountTable2x2x2, Dataset
from .errors import (
    CongenialityError,
    DegenerateTable,
    FormulaError,
    MultipleRootsAmbiguous,
    NegativeDiscriminant,
    NoRoot,
    OutcomeMeanOutOfRange,
    SpecMismatch,
    WeakInstrument,
)
from .formula import INTERCEPT, ModelSpec, Term, build_design, parse_formula, spec_hash
from .glm import FitResult, fit_arrays, fit_glm
from .links import ETA_CLAMP, expit
from .results import Z_975, CausalFit, RootDiagnostics
from .variance import ScoreBlock, ScoreStack, glm_block, sandwich_cov

# bias-approximation constant for the probit approximation of the logistic
# CDF; documented, not used by any estimator
BIAS_APPROX_C = 16.0 * np.sqrt(3.0) / (15.0 * np.pi)
# logit-to-probit scale factor
PROBIT_LOGIT_SCALE = 0.6071

DELTA_TOL = 1e-8
T_FLOOR = 1e-6
DERIVED = ("xhat", "r")


# -- default model specs ----------------------------------------------------


def _cov_terms(data: Dataset) -> list[Term]:
    return [Term("main", (c,)) for c in data.covariate_names]


def _z_term(data: Dataset) -> Term:
    return Term("main", ("z",)) if np.unique(data.z).size <= 2 else Term("factor", ("z",))


def default_assoc_spec(data: Dataset) -> ModelSpec:
    """``y ~ x + z + C`` (dummy-coded ``z`` when it has more than two levels)."""
    return ModelSpec((INTERCEPT, Term("main", ("x",)), _z_term(data), *_cov_terms(data)), "logit", "y")


def default_first_stage(data: Dataset) -> ModelSpec:
    """``x ~ z + C`` with identity link (linear in ``z``)."""
    return ModelSpec((INTERCEPT, Term("main", ("z",)), *_cov_terms(data)), "identity", "x")


def default_m_spec() -> ModelSpec:
    """A constant causal log odds ratio."""
    return ModelSpec((INTERCEPT,), "identity")


def _as_spec(spec, default: ModelSpec, link: str | None = None) -> ModelSpec:
    if spec is None:
        return default
    if isinstance(spec, str):
        return parse_formula(spec, link or default.link)
    return spec


def _check_m_spec(m_spec: ModelSpec) -> None:
    bad = m_spec.columns_used() & {"x", "y", "z", *DERIVED}
    if bad:
        raise FormulaError(f"effect-modification model may only use covariates, got {sorted(bad)}")
    if any(t.kind == "offset" for t in m_spec.terms):
        raise FormulaError("effect-modification model cannot carry an offset")


def _m_matrix(m_spec: ModelSpec, frame) -> np.ndarray:
    return build_design(m_spec, frame).matrix


def _times(m_spec: ModelSpec, col: str) -> list[Term]:
    """Terms of ``m(C; psi) * col``."""
    out = []
    for t in m_spec.terms:
        if t.kind == "intercept":
            out.append(Term("main", (col,)))
        elif t.kind in ("main", "product"):
            out.append(Term("product", (*t.names, col)))
        else:
            raise FormulaError(f"term {t.label} not supported in the effect-modification model")
    return out


def _instrument_columns(names) -> list[int]:
    idx = []
    for i, nm in enumerate(names):
        parts = nm.split(":")
        if "z" in parts or any(p.startswith("C(z)") for p in parts):
            idx.append(i)
    return idx


def _wald(psi, se):
    psi = np.asarray(psi, dtype=float)
    se = np.asarray(se, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = 2.0 * stats.norm.sf(np.abs(psi / se))
    p = np.where(se > 0, p, np.where(psi == 0, 1.0, 0.0))
    return psi - Z_975 * se, psi + Z_975 * se, p


def _scalar(v):
    a = np.asarray(v, dtype=float)
    return float(a.reshape(-1)[0]) if a.size == 1 else a


# -- two-stage estimators ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class FirstStage:
    fit: FitResult
    spec: ModelSpec
    G: np.ndarray
    mask: np.ndarray

    def fitted(self, theta=None) -> np.ndarray:
        return self.G @ (self.fit.beta if theta is None else theta)


def fit_first_stage(
    data: Dataset,
    first_stage: ModelSpec | str | None = None,
    population: str = "all",
    t_floor: float = T_FLOOR,
) -> FirstStage:
    """Least-squares fit of the exposure on the instrument (and covariates).

    Raises
    ------
    WeakInstrument
        For a binary instrument whose exposure means coincide, or when every
        instrument coefficient has |t| below ``t_floor``.
    """
    spec = _as_spec(first_stage, default_first_stage(data), "identity")
    if spec.link != "identity":
        raise FormulaError("first stage must use the identity link")
    if population not in ("all", "controls_only"):
        raise ValueError("population must be 'all' or 'controls_only'")
    frame = data.frame()
    design = build_design(spec, frame)
    mask = np.ones(data.n, dtype=bool) if population == "all" else data.y == 0
    beta, vcov, score, it, conv, sigma2, trace = fit_arrays(
        design.matrix[mask], data.x[mask], "identity", names=design.names
    )
    idx = _instrument_columns(design.names)
    if not idx:
        raise FormulaError("first stage does not involve the instrument")
    zpop = data.z[mask]
    if np.unique(zpop).size == 2:
        lv = np.unique(zpop)
        delta = data.x[mask][zpop == lv[1]].mean() - data.x[mask][zpop == lv[0]].mean()
        if abs(delta) < DELTA_TOL:
            raise WeakInstrument(f"exposure means do not differ across instrument levels (delta={delta:.3g})")
    se = np.sqrt(np.clip(np.diag(vcov), 0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.abs(beta[idx]) / se[idx]
    t = np.where(se[idx] > 0, t, np.where(beta[idx] == 0, 0.0, np.inf))
    if np.all(t < t_floor):
        raise WeakInstrument(f"first-stage instrument t-statistics {np.round(t, 8).tolist()} below {t_floor}")
    fit = FitResult(
        beta, vcov, score, it, conv, spec_hash(spec, design.levels), design.names, "identity",
        dict(design.levels), "x", int(mask.sum()), sigma2,
    )
    return FirstStage(fit, spec, design.matrix, mask)


def _first_block(fs: FirstStage, x: np.ndarray, sl: slice) -> ScoreBlock:
    G = fs.G
    m = fs.mask.astype(float)

    def scores(theta):
        return (m * (x - G @ theta[sl]))[:, None] * G

    def jac(theta, w):
        out = np.zeros((G.shape[1], theta.size))
        out[:, sl] = -G.T @ (G * (w * m)[:, None])
        return out

    return ScoreBlock("first_stage", G.shape[1], scores, jac)


def _two_stage(data, first_stage, m_spec, population, control_terms, estimator, t_floor):
    m_spec = _as_spec(m_spec, default_m_spec(), "identity")
    _check_m_spec(m_spec)
    clash = set(DERIVED) & set(data.covariate_names)
    if clash:
        raise FormulaError(f"covariate names {sorted(clash)} are reserved for derived columns")
    fs = fit_first_stage(data, first_stage, population, t_floor)
    psi_terms = _times(m_spec, "xhat")
    spec2 = ModelSpec(tuple(control_terms) + tuple(psi_terms), "logit", "y")
    base = data.frame()

    def frame_at(theta1):
        xh = fs.G @ theta1
        f = dict(base)
        f["xhat"] = xh
        f["r"] = data.x - xh
        return f

    d2 = build_design(spec2, frame_at(fs.fit.beta))
    beta2, vcov2, score2, it2, conv2, _, trace2 = fit_arrays(d2.matrix, data.y, "logit", names=d2.names)
    fit2 = FitResult(
        beta2, vcov2, score2, it2, conv2, spec_hash(spec2, d2.levels), d2.names, "logit",
        dict(d2.levels), "y", data.n, None, trace2,
    )
    p1 = fs.G.shape[1]
    p2 = d2.matrix.shape[1]
    sl1, sl2 = slice(0, p1), slice(p1, p1 + p2)

    def design2(theta):
        return build_design(spec2, frame_at(theta[sl1]), d2.levels).matrix

    blocks = [_first_block(fs, data.x, sl1), glm_block("second_stage", design2, data.y, "logit", sl2)]
    theta = np.concatenate([fs.fit.beta, beta2])
    names = tuple(f"first:{n}" for n in fs.fit.names) + tuple(f"second:{n}" for n in d2.names)
    stack = ScoreStack(tuple(blocks), theta, None, names)
    cov = sandwich_cov(stack)
    k = len(psi_terms)
    psi_idx = np.arange(p1 + p2 - k, p1 + p2)
    psi = theta[psi_idx]
    se = np.sqrt(np.diag(cov)[psi_idx])
    lo, hi, p = _wald(psi, se)
    return CausalFit(
        psi=_scalar(psi), se=_scalar(se), ci_low=_scalar(lo), ci_high=_scalar(hi), p_value=_scalar(p),
        estimator=estimator, nuisance={"first_stage": fs.fit, "second_stage": fit2},
        param_names=names, vcov=cov, ci_method="wald",
        extras={"first_stage_population": population},
    )


def standard_iv(
    data: Dataset,
    first_stage: ModelSpec | str | None = None,
    m_spec: ModelSpec | str | None = None,
    first_stage_population: str = "all",
    t_floor: float = T_FLOOR,
) -> CausalFit:
    """Two-stage IV: ``logit E(Y | Z, C) = omega'C + m(C; psi) * Xhat``.

    Parameters
    ----------
    data : Dataset
    first_stage : ModelSpec or str, optional
        Linear model for ``x``; defaults to ``x ~ z + C``.
    m_spec : ModelSpec or str, optional
        Effect-modification design in the covariates; defaults to a constant.
    first_stage_population : {"all", "controls_only"}
        ``controls_only`` fits the first stage on rows with ``y == 0``.

    Returns
    -------
    CausalFit
        Sandwich standard errors stack both stages.
    """
    controls = [INTERCEPT, *_cov_terms(data)]
    return _two_stage(data, first_stage, m_spec, first_stage_population, controls, "StandardIV", t_floor)


def adjusted_iv(
    data: Dataset,
    first_stage: ModelSpec | str | None = None,
    m_spec: ModelSpec | str | None = None,
    residual_terms: ModelSpec | str | None = None,
    first_stage_population: str = "all",
    t_floor: float = T_FLOOR,
) -> CausalFit:
    """Control-function IV: the first-stage residual ``r`` enters the second stage.

    ``residual_terms`` describes the nuisance part of the second stage over
    the covariates and the column ``r``; the default is ``~ 1 + C + r``.
    """
    if residual_terms is None:
        controls = [INTERCEPT, *_cov_terms(data), Term("main", ("r",))]
    else:
        rt = _as_spec(residual_terms, default_m_spec(), "logit")
        if "r" not in rt.columns_used():
            raise FormulaError("residual terms must involve the residual column 'r'")
        controls = list(rt.terms)
    return _two_stage(data, first_stage, m_spec, first_stage_population, controls, "AdjustedIV", t_floor)


def wald_ratio(or_yz: float, delta_xz: float) -> float:
    """``log(or_yz) / delta_xz``, the ratio form of the binary-instrument IV estimator."""
    if not or_yz > 0:
        raise ValueError("odds ratio must be positive")
    if abs(delta_xz) < 1e-12:
        raise WeakInstrument("exposure difference across instrument levels is zero")
    return float(np.log(or_yz) / delta_xz)


def table_summaries(table: CountTable2x2x2) -> tuple[float, float]:
    """Instrument-outcome odds ratio and exposure-mean difference of a count table."""
    a = table.array  # [x][z][y]
    yz = a.sum(axis=0)  # [z][y]
    or_yz = (yz[1, 1] * yz[0, 0]) / (yz[1, 0] * yz[0, 1])
    nz = a.sum(axis=(0, 2))
    delta = a[1].sum(axis=1)[1] / nz[1] - a[1].sum(axis=1)[0] / nz[0]
    return float(or_yz), float(delta)


def unadjusted_logistic(data: Dataset, spec: ModelSpec | str | None = None, variance: str = "model") -> CausalFit:
    """Ordinary logistic regression coefficient of ``x`` (no IV correction).

    The default model ``y ~ x + z + C`` adjusts for the instrument.
    ``variance`` picks the inverse-information (``"model"``) or sandwich
    (``"sandwich"``) standard error; the other one is kept in ``extras``.
    """
    if variance not in ("model", "sandwich"):
        raise ValueError("variance must be 'model' or 'sandwich'")
    spec = _as_spec(spec, default_assoc_spec(data), "logit")
    fit = fit_glm(data, spec)
    if "x" not in fit.names:
        raise FormulaError("model must contain a main effect of x")
    j = fit.names.index("x")
    block = glm_block("outcome", build_design(spec, data.frame()).matrix, data.y, "logit", slice(0, len(fit.names)))
    cov_sw = sandwich_cov(ScoreStack((block,), fit.beta, None, fit.names))
    cov = np.asarray(fit.vcov_model) if variance == "model" else cov_sw
    psi, se = float(fit.beta[j]), float(np.sqrt(cov[j, j]))
    lo, hi, p = _wald(psi, se)
    return CausalFit(
        psi, se, float(lo), float(hi), float(p), "UnadjustedLogistic", nuisance={"outcome": fit},
        param_names=fit.names, vcov=cov,
        extras={"se_model": float(fit.se_model[j]), "se_sandwich": float(np.sqrt(cov_sw[j, j])), "variance": variance},
    )


# -- logistic structural mean model ------------------------------------------


@dataclass(frozen=True)
class SearchConfig:
    """Root search over ``[lo, hi]``: grid scan, Brent refinement, Newton polish."""

    lo: float = -10.0
    hi: float = 10.0
    step: float = 0.25
    xtol: float = 1e-10
    select: str = "smallest_abs"  # or "largest_abs", "lowest", "highest"
    polish: bool = True

    def grid(self) -> np.ndarray:
        m = int(round((self.hi - self.lo) / self.step))
        return np.linspace(self.lo, self.hi, m + 1)


@dataclass(frozen=True, eq=False)
class SMMProblem:
    """Everything needed to evaluate the structural-mean-model estimating function.

    ``U_x(psi) = sum_i w_i Q_i H_i``, with
    ``H_i = expit(lin_i - M_i psi (X_i - x))`` and ``Q`` the instrument
    residual (times the effect-modification design), orthogonalized
    against the covariate design ``Ct`` so that the centering of ``H`` by its
    conditional mean given the covariates is built in.
    """

    data: Dataset
    weights: np.ndarray | None
    assoc_spec: ModelSpec
    m_spec: ModelSpec
    assoc_fit: FitResult
    A: np.ndarray
    offset: np.ndarray
    M: np.ndarray
    d: np.ndarray
    Ct: np.ndarray
    gamma: np.ndarray
    Q: np.ndarray

    @property
    def w(self) -> np.ndarray:
        return np.ones(self.data.n) if self.weights is None else self.weights

    @property
    def k(self) -> int:
        return self.M.shape[1]

    @property
    def nobs(self) -> float:
        return float(self.w.sum())

    def lin(self, beta=None) -> np.ndarray:
        b = self.assoc_fit.beta if beta is None else beta
        return np.clip(self.offset + self.A @ b, -ETA_CLAMP, ETA_CLAMP)

    def H(self, psi, x_ref: float = 0.0, beta=None) -> np.ndarray:
        psi = np.atleast_1d(np.asarray(psi, dtype=float))
        return expit(self.lin(beta) - (self.M @ psi) * (self.data.x - x_ref))

    def U(self, psi, x_ref: float = 0.0) -> np.ndarray:
        return (self.Q * self.w[:, None]).T @ self.H(psi, x_ref)

    def kernel_args(self, x_ref: float = 0.0):
        if self.k != 1:
            raise ValueError("scalar kernel needs a one-dimensional effect")
        return self.lin(), self.M[:, 0] * (self.data.x - x_ref), self.w * self.Q[:, 0]


def _ct_design(data: Dataset) -> np.ndarray:
    cols = [np.ones(data.n)] + [data.covariates[c] for c in data.covariate_names]
    return np.column_stack(cols)


def check_congenial(spec: ModelSpec, data: Dataset) -> None:
    """Association model must have an intercept and an unrestricted instrument main effect."""
    if not spec.has_intercept:
        raise CongenialityError("association model needs an intercept")
    binary = np.unique(data.z).size <= 2
    ok = any(
        (t.kind == "factor" and t.names == ("z",)) or (binary and t.kind == "main" and t.names == ("z",))
        for t in spec.terms
    )
    if not ok:
        raise CongenialityError(
            "association model needs an unrestricted main effect of z "
            "(use C(z) for an instrument with more than two levels, or set allow_uncongenial)"
        )


def build_smm_problem(
    data: Dataset,
    assoc_spec: ModelSpec | str | None = None,
    m_spec: ModelSpec | str | None = None,
    d_fn: Callable[[Dataset], np.ndarray] | None = None,
    weights=None,
    allow_uncongenial: bool = False,
    assoc_fit: FitResult | None = None,
) -> SMMProblem:
    assoc_spec = _as_spec(assoc_spec, default_assoc_spec(data), "logit")
    if assoc_spec.link != "logit":
        raise FormulaError("association model must use the logit link")
    m_spec = _as_spec(m_spec, default_m_spec(), "identity")
    _check_m_spec(m_spec)
    if not allow_uncongenial:
        check_congenial(assoc_spec, data)
    w = None if weights is None else np.asarray(weights, dtype=float)
    frame = data.frame()
    design = build_design(assoc_spec, frame)
    if assoc_fit is None:
        beta, vcov, score, it, conv, _, trace = fit_arrays(design.matrix, data.y, "logit", w, design.offset, design.names)
        assoc_fit = FitResult(
            beta, vcov, score, it, conv, spec_hash(assoc_spec, design.levels), design.names, "logit",
            dict(design.levels), "y", data.n, None, trace,
        )
    elif assoc_fit.design_hash != spec_hash(assoc_spec, assoc_fit.levels):
        raise SpecMismatch("association fit does not match the association model")
    M = _m_matrix(m_spec, frame)
    d = np.asarray(d_fn(data) if d_fn is not None else data.z, dtype=float).reshape(-1)
    if d.size != data.n:
        raise ValueError("instrument function must return one value per row")
    Ct = _ct_design(data)
    ww = np.ones(data.n) if w is None else w
    ctw = Ct * ww[:, None]
    gram = Ct.T @ ctw
    gamma = np.linalg.solve(gram, ctw.T @ d)
    r = d - Ct @ gamma
    Q = M * r[:, None]
    Q = Q - Ct @ np.linalg.solve(gram, ctw.T @ Q)
    return SMMProblem(data, w, assoc_spec, m_spec, assoc_fit, design.matrix, design.offset, M, d, Ct, gamma, Q)


def implied_ey0(prob: SMMProblem, psi, x_ref: float = 0.0) -> float:
    return float(prob.w @ prob.H(psi, x_ref) / prob.nobs)


def find_roots(prob: SMMProblem, search: SearchConfig = SearchConfig(), x_ref: float = 0.0, backend=None):
    """All sign changes of the scalar estimating function on the search grid.

    Returns ``(roots, grid, values)``.
    """
    lin, xs, r = prob.kernel_args(x_ref)
    grid = search.grid()
    vals = _kernels.ee_grid(lin, xs, r, grid, backend=backend)
    roots = []
    for i in range(grid.size - 1):
        a, b = vals[i], vals[i + 1]
        if a == 0.0:
            roots.append(grid[i])
            continue
        if a * b < 0:
            root, _ = _kernels.brent(lin, xs, r, grid[i], grid[i + 1], search.xtol, 200, backend=backend)
            if search.polish:
                root = _polish(lin, xs, r, root, grid[i], grid[i + 1], backend)
            roots.append(root)
    if vals[-1] == 0.0:
        roots.append(grid[-1])
    return np.array(sorted(roots)), grid, vals


def _polish(lin, xs, r, root, a, b, backend):
    v, dv = _kernels.ee_value_deriv(lin, xs, r, root, backend=backend)
    for _ in range(3):
        if dv == 0 or v == 0:
            break
        cand = root - v / dv
        if not a <= cand <= b:
            break
        vc, dc = _kernels.ee_value_deriv(lin, xs, r, cand, backend=backend)
        if abs(vc) >= abs(v):
            break
        root, v, dv = cand, vc, dc
    return root


def select_root(roots, rule: str = "smallest_abs") -> int:
    roots = np.asarray(roots, dtype=float)
    if rule == "smallest_abs":
        key = np.abs(roots)
    elif rule == "largest_abs":
        key = -np.abs(roots)
    elif rule == "lowest":
        key = roots
    elif rule == "highest":
        key = -roots
    else:
        raise ValueError(f"unknown root-selection rule {rule!r}")
    order = np.argsort(key, kind="stable")
    if roots.size > 1 and np.isclose(key[order[0]], key[order[1]], rtol=0, atol=1e-12):
        raise MultipleRootsAmbiguous(f"roots {roots.tolist()} tie under rule {rule!r}")
    return int(order[0])


def solve_psi(prob: SMMProblem, search: SearchConfig = SearchConfig(), x_ref: float = 0.0, curve: bool = False):
    """Solve the estimating equation at reference level ``x_ref``.

    Returns ``(psi, diagnostics)``; raises :class:`NoRoot` with the scanned
    curve attached when the function keeps one sign over the bracket.
    """
    bracket = (search.lo, search.hi)
    if prob.k == 1:
        roots, grid, vals = find_roots(prob, search, x_ref)
        crv = tuple((float(g), float(v) / prob.nobs, 0.0) for g, v in zip(grid, vals))
        if roots.size == 0:
            diag = RootDiagnostics.from_roots((), bracket, curve=crv, rule=search.select)
            raise NoRoot(
                f"estimating function keeps one sign on [{search.lo}, {search.hi}]", diag
            )
        idx = select_root(roots, search.select)
        ey0 = tuple(implied_ey0(prob, r, x_ref) for r in roots)
        note = "" if roots.size == 1 else f"{roots.size} roots; selected by rule {search.select}"
        diag = RootDiagnostics.from_roots(
            roots, bracket, curve=crv if curve else None, implied_ey0=ey0, selected=idx,
            rule=search.select, note=note,
        )
        return float(roots[idx]), diag
    # effect modification: start from the constant-effect solution
    const = build_smm_problem(
        prob.data, prob.assoc_spec, default_m_spec(), lambda _d: prob.d, prob.weights, True, prob.assoc_fit
    )
    psi0, _ = solve_psi(const, search, x_ref)
    start = np.zeros(prob.k)
    ones = np.flatnonzero(np.all(prob.M == 1.0, axis=0))
    if ones.size:
        start[ones[0]] = psi0

    def fn(p):
        return prob.U(p, x_ref) / prob.nobs

    def jac(p):
        return _dU_dpsi(prob, p, x_ref) / prob.nobs

    sol = optimize.root(fn, start, jac=jac, method="hybr", options={"xtol": 1e-12})
    if not sol.success or np.max(np.abs(fn(sol.x))) > 1e-9:
        raise NoRoot(f"no solution for the effect-modification model: {sol.message}")
    diag = RootDiagnostics("None", (), bracket, None, (implied_ey0(prob, sol.x, x_ref),), None, "newton",
                           "vector parameter solved by hybrid Newton from the constant-effect root")
    return sol.x, diag


def _dU_dpsi(prob: SMMProblem, psi, x_ref: float = 0.0) -> np.ndarray:
    h = prob.H(psi, x_ref)
    xs = prob.data.x - x_ref
    g = prob.w * h * (1.0 - h) * xs
    return -(prob.Q * g[:, None]).T @ prob.M


# -- stacked estimating functions for the SMM ---------------------------------


def smm_stack(prob: SMMProblem, psi, x_ref: float = 0.0, delta=None) -> ScoreStack:
    """Stack (association model, E[d|C], E[H|C], psi) with analytic Jacobians."""
    A, Ct, M, y = prob.A, prob.Ct, prob.M, prob.data.y
    xs = prob.data.x - x_ref
    p, q, k = A.shape[1], Ct.shape[1], prob.k
    sb, sg, sd, sp = slice(0, p), slice(p, p + q), slice(p + q, p + 2 * q), slice(p + 2 * q, p + 2 * q + k)
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    w = prob.w
    if delta is None:
        h0 = prob.H(psi, x_ref)
        delta = np.linalg.solve(Ct.T @ (Ct * w[:, None]), (Ct * w[:, None]).T @ h0)
    theta = np.concatenate([prob.assoc_fit.beta, prob.gamma, delta, psi])
    unclamped_lin = prob.offset + A @ prob.assoc_fit.beta
    free = (np.abs(unclamped_lin) < ETA_CLAMP).astype(float)

    def H(theta):
        lin = np.clip(prob.offset + A @ theta[sb], -ETA_CLAMP, ETA_CLAMP)
        return expit(lin - (M @ theta[sp]) * xs)

    assoc = glm_block("association", A, y, "logit", sb, prob.offset)

    def g_scores(theta):
        return (prob.d - Ct @ theta[sg])[:, None] * Ct

    def g_jac(theta, w):
        out = np.zeros((q, theta.size))
        out[:, sg] = -Ct.T @ (Ct * w[:, None])
        return out

    def d_scores(theta):
        return (H(theta) - Ct @ theta[sd])[:, None] * Ct

    def d_jac(theta, w):
        h = H(theta)
        hp = w * h * (1.0 - h)
        out = np.zeros((q, theta.size))
        out[:, sb] = Ct.T @ (A * (hp * free)[:, None])
        out[:, sd] = -Ct.T @ (Ct * w[:, None])
        out[:, sp] = -Ct.T @ (M * (hp * xs)[:, None])
        return out

    def u_scores(theta):
        r = prob.d - Ct @ theta[sg]
        e = H(theta) - Ct @ theta[sd]
        return M * (r * e)[:, None]

    def u_jac(theta, w):
        h = H(theta)
        r = prob.d - Ct @ theta[sg]
        e = h - Ct @ theta[sd]
        hp = h * (1.0 - h)
        out = np.zeros((k, theta.size))
        out[:, sb] = M.T @ (A * (w * r * hp * free)[:, None])
        out[:, sg] = -M.T @ (Ct * (w * e)[:, None])
        out[:, sd] = -M.T @ (Ct * (w * r)[:, None])
        out[:, sp] = -M.T @ (M * (w * r * hp * xs)[:, None])
        return out

    blocks = (
        assoc,
        ScoreBlock("instrument_mean", q, g_scores, g_jac),
        ScoreBlock("counterfactual_mean", q, d_scores, d_jac),
        ScoreBlock("psi", k, u_scores, u_jac),
    )
    names = (
        tuple(f"assoc:{n}" for n in prob.assoc_fit.names)
        + tuple(f"E[d|C]:{i}" for i in range(q))
        + tuple(f"E[H|C]:{i}" for i in range(q))
        + tuple(f"psi:{i}" for i in range(k))
    )
    return ScoreStack(blocks, theta, prob.weights, names)


def score_statistic(prob: SMMProblem, psi0: float, x_ref: float = 0.0) -> float:
    """Robust score statistic for ``psi = psi0`` (chi-square, 1 df).

    The per-subject estimating function is corrected for estimation of the
    nuisance parameters before its variance is taken.
    """
    stack = smm_stack(prob, psi0, x_ref)
    s = stack.scores()
    J = stack.jacobian()
    k = prob.k
    nu = slice(0, stack.dim - k)
    ps = slice(stack.dim - k, stack.dim)
    # J_ps,nu J_nu,nu^-1 s_i, solved on the small side
    phi = s[:, ps] - s[:, nu] @ np.linalg.solve(J[nu, nu].T, J[ps, nu].T)
    w = stack._w(s.shape[0])
    total = w @ phi
    var = (phi * w[:, None]).T @ phi
    return float(total @ np.linalg.solve(var, total))


def score_interval(prob: SMMProblem, psi_hat: float, se: float, x_ref: float = 0.0, level: float = 0.95,
                   limit: float = 30.0) -> tuple[float, float]:
    """Connected set ``{psi : score statistic <= chi2 quantile}`` around ``psi_hat``.

    Endpoints beyond ``psi_hat +- limit`` are reported as infinite.
    """
    crit = stats.chi2.ppf(level, 1)

    def f(p):
        return score_statistic(prob, p, x_ref) - crit

    step = min(max(se, 0.05), 2.0) if np.isfinite(se) else 0.5
    ends = []
    for sign in (-1.0, 1.0):
        a = psi_hat
        b = psi_hat + sign * step
        found = False
        while abs(b - psi_hat) <= limit:
            if f(b) > 0:
                found = True
                break
            a, b = b, b + sign * step
            step *= 1.5
        if not found:
            ends.append(sign * np.inf)
            continue
        ends.append(optimize.brentq(f, min(a, b), max(a, b), xtol=1e-10))
    return float(ends[0]), float(ends[1])


def _smm_fit(prob: SMMProblem, search: SearchConfig, ci: str, curve: bool, estimator: str,
             psi=None, diag=None, extras=None) -> CausalFit:
    if psi is None:
        psi, diag = solve_psi(prob, search, 0.0, curve)
    stack = smm_stack(prob, psi)
    cov = sandwich_cov(stack)
    k = prob.k
    se = np.sqrt(np.diag(cov)[-k:])
    psi_arr = np.atleast_1d(psi)
    lo, hi, p = _wald(psi_arr, se)
    ci_method = "wald"
    if ci == "score" and k == 1:
        lo, hi = score_interval(prob, float(psi_arr[0]), float(se[0]))
        p = stats.chi2.sf(score_statistic(prob, 0.0), 1)
        ci_method = "score"
    elif ci not in ("score", "wald"):
        raise ValueError("ci must be 'score' or 'wald'")
    ex = {"wald_ci": [float(v) for v in np.atleast_1d(_wald(psi_arr, se)[0])] +
          [float(v) for v in np.atleast_1d(_wald(psi_arr, se)[1])],
          "implied_ey0": implied_ey0(prob, psi_arr)}
    ex.update(extras or {})
    return CausalFit(
        psi=_scalar(psi_arr), se=_scalar(se), ci_low=_scalar(lo), ci_high=_scalar(hi), p_value=_scalar(p),
        estimator=estimator, diagnostics=diag, nuisance={"association": prob.assoc_fit},
        param_names=stack.names, vcov=cov, ci_method=ci_method, extras=ex,
    )


def logistic_smm(
    data: Dataset,
    assoc_spec: ModelSpec | str | None = None,
    m_spec: ModelSpec | str | None = None,
    d_fn: Callable[[Dataset], np.ndarray] | None = None,
    search: SearchConfig = SearchConfig(),
    ci: str = "score",
    curve: bool = False,
    allow_uncongenial: bool = False,
    weights=None,
) -> CausalFit:
    """Logistic structural mean model estimator.

    Parameters
    ----------
    data : Dataset
    assoc_spec : ModelSpec or str, optional
        Logistic association model for ``y``; defaults to ``y ~ x + z + C``.
    m_spec : ModelSpec or str, optional
        Effect modification by covariates; defaults to a constant effect.
    d_fn : callable, optional
        Instrument function ``d(Z, C)``; defaults to ``z``.
    search : SearchConfig
        Bracket, grid and root-selection rule.
    ci : {"score", "wald"}
        ``score`` inverts the robust score test (scalar effect only) and
        reports its p-value; ``wald`` uses the sandwich standard error.
    curve : bool
        Attach the scanned estimating-function curve to the diagnostics.
    allow_uncongenial : bool
        Skip the check for an intercept and unrestricted instrument main effect.
    weights : array_like, optional
        Frequency weights.

    Raises
    ------
    NoRoot
        The estimating function has constant sign over the bracket.
    MultipleRootsAmbiguous
        Two roots tie under the selection rule.
    CongenialityError
    """
    prob = build_smm_problem(data, assoc_spec, m_spec, d_fn, weights, allow_uncongenial)
    return _smm_fit(prob, search, ci, curve, "LogisticSMM")


def counterfactual_predict(
    psi,
    assoc_fit: FitResult,
    assoc_spec: ModelSpec,
    m_spec: ModelSpec,
    data: Dataset,
    x_ref: float = 0.0,
) -> np.ndarray:
    """``expit{m(X, Z, C; beta) - m(C; psi) (X - x_ref)}`` for every row."""
    if assoc_fit.design_hash != spec_hash(assoc_spec, assoc_fit.levels):
        raise SpecMismatch("association fit does not match the association model")
    frame = data.frame()
    d = build_design(assoc_spec, frame, assoc_fit.levels)
    lin = np.clip(d.offset + d.matrix @ assoc_fit.beta, -ETA_CLAMP, ETA_CLAMP)
    M = _m_matrix(m_spec, frame)
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    if psi.size != M.shape[1]:
        raise SpecMismatch("psi does not match the effect-modification model")
    return expit(lin - (M @ psi) * (data.x - x_ref))


def estimating_curve(
    data: Dataset,
    assoc_fit: FitResult,
    assoc_spec: ModelSpec,
    m_spec: ModelSpec | None,
    psi_grid,
) -> list[tuple[float, float, float]]:
    """Evaluate the estimating equation along ``psi_grid``.

    For a binary instrument without covariates each triple is
    ``(psi, mean H among z=1, mean H among z=0)``; otherwise it is
    ``(psi, U(psi)/n, 0)``.
    """
    grid = np.asarray(psi_grid, dtype=float).reshape(-1)
    if grid.size == 0 or not np.all(np.isfinite(grid)):
        raise ValueError("psi grid must be nonempty and finite")
    m_spec = m_spec or default_m_spec()
    prob = build_smm_problem(data, assoc_spec, m_spec, None, None, True, assoc_fit)
    levels = np.unique(data.z)
    if levels.size == 2 and not data.covariates and prob.k == 1:
        lin = prob.lin()
        xs = prob.M[:, 0] * data.x
        hi = (data.z == levels[1]).astype(float)
        lo = 1.0 - hi
        lhs = _kernels.ee_grid(lin, xs, hi / hi.sum(), grid)
        rhs = _kernels.ee_grid(lin, xs, lo / lo.sum(), grid)
        return [(float(g), float(a), float(b)) for g, a, b in zip(grid, lhs, rhs)]
    if prob.k != 1:
        raise ValueError("curve needs a one-dimensional effect")
    lin, xs, r = prob.kernel_args()
    vals = _kernels.ee_grid(lin, xs, r, grid) / prob.nobs
    return [(float(g), float(v), 0.0) for g, v in zip(grid, vals)]


# -- closed form for binary exposure and instrument -----------------------------


def _table_rows(table: CountTable2x2x2):
    xs, zs, ys, ws = [], [], [], []
    for x, z, y, c in table.cells():
        if c > 0:
            xs.append(x)
            zs.append(z)
            ys.append(y)
            ws.append(c)
    return Dataset(np.array(ys, float), np.array(xs, float), np.array(zs, float)), np.array(ws, float)


def table_assoc_beta(table: CountTable2x2x2, assoc: str = "main") -> np.ndarray:
    """Association-model coefficients ``(b0, bx, bz, bxz)`` from a count table.

    ``saturated`` uses the four cell log odds directly; ``main`` fits
    ``y ~ x + z`` by maximum likelihood and reports ``bxz = 0``.
    """
    table.check_estimable()
    a = table.array
    if assoc == "saturated":
        if np.any(a == 0):
            raise DegenerateTable("saturated model needs both outcomes in every (x, z) cell")
        lo = np.log(a[:, :, 1] / a[:, :, 0])  # [x][z]
        return np.array([lo[0, 0], lo[1, 0] - lo[0, 0], lo[0, 1] - lo[0, 0], lo[1, 1] - lo[1, 0] - lo[0, 1] + lo[0, 0]])
    if assoc == "main":
        ds, w = _table_rows(table)
        X = np.column_stack([np.ones(ds.n), ds.x, ds.z])
        beta = fit_arrays(X, ds.y, "logit", w)[0]
        return np.array([beta[0], beta[1], beta[2], 0.0])
    raise ValueError("assoc must be 'main' or 'saturated'")


def closed_form_roots(table: CountTable2x2x2, beta) -> np.ndarray:
    """Real roots (log scale) of the quadratic in ``exp(psi)``."""
    a = table.array
    nz = a.sum(axis=(0, 2))
    xhat = a.sum(axis=2) / nz[None, :]  # [x][z]
    b0, b1, b2, b3 = beta
    q2 = expit(b0) * xhat[0, 0] - expit(b0 + b2) * xhat[0, 1]
    e1 = np.exp(b0 + b1)
    e2 = np.exp(b0 + b1 + b2 + b3)
    q1 = (q2 + xhat[1, 0]) * e1 + (q2 - xhat[1, 1]) * e2
    q3 = e1 * e2
    c = (q2 - xhat[1, 1] + xhat[1, 0]) * q3
    if q2 == 0.0:
        us = np.array([-c / q1]) if q1 != 0 else np.array([])
    else:
        disc = q1 * q1 - 4.0 * q2 * c
        if disc < 0:
            raise NegativeDiscriminant(f"quadratic has negative discriminant {disc:.3g}")
        sq = np.sqrt(disc)
        # numerically stable pair
        t = -0.5 * (q1 + np.copysign(sq, q1))
        us = np.array([t / q2, c / t]) if t != 0 else np.array([-q1 / (2 * q2)])
    us = us[np.isfinite(us) & (us > 0)]
    return np.sort(np.log(us))


def closed_form_binary(
    table: CountTable2x2x2,
    assoc: str = "main",
    select: str = "smallest_abs",
    ci: str = "score",
) -> CausalFit:
    """Closed-form structural-mean-model estimate for a 2x2x2 count table.

    ``assoc`` picks the association model (``main``: ``y ~ x + z``,
    ``saturated``: ``y ~ x * z``). Standard errors come from the same
    stacked estimating functions as :func:`logistic_smm`, evaluated on the
    eight cells with frequency weights.
    """
    beta = table_assoc_beta(table, assoc)
    _, delta = table_summaries(table)
    if abs(delta) < DELTA_TOL:
        raise WeakInstrument("exposure means do not differ across instrument levels")
    roots = closed_form_roots(table, beta)
    ds, w = _table_rows(table)
    spec = parse_formula("y ~ x + z" if assoc == "main" else "y ~ x + z + x:z")
    prob = build_smm_problem(ds, spec, None, None, w, False)
    bracket = (float(roots.min()), float(roots.max())) if roots.size else (-np.inf, np.inf)
    if roots.size == 0:
        raise NoRoot("quadratic has no positive root", RootDiagnostics.from_roots((), bracket, rule=select))
    idx = select_root(roots, select)
    ey0 = tuple(implied_ey0(prob, r) for r in roots)
    note = "" if roots.size == 1 else f"{roots.size} roots; selected by rule {select}"
    diag = RootDiagnostics.from_roots(roots, bracket, implied_ey0=ey0, selected=idx, rule=select, note=note)
    return _smm_fit(prob, SearchConfig(select=select), ci, False, "ClosedFormBinary", float(roots[idx]), diag,
                    {"assoc_beta": [float(b) for b in beta]})


# -- probit-normal structural mean model -----------------------------------------


def probit_normal_ratio(lambda1: float, theta1: float, sigma2: float, alpha1: float) -> float:
    """``lambda1 * sqrt(1 + theta1^2 sigma^2) / alpha1``."""
    if alpha1 == 0:
        raise WeakInstrument("instrument coefficient in the exposure model is zero")
    return float(lambda1 * np.sqrt(1.0 + theta1 * theta1 * sigma2) / alpha1)


def probit_normal_smm(
    data: Dataset,
    first_stage: ModelSpec | str | None = None,
    assoc_spec: ModelSpec | str | None = None,
    reduced_spec: ModelSpec | str | None = None,
    t_floor: float = T_FLOOR,
) -> CausalFit:
    """Probit structural mean model under a conditionally normal exposure.

    ``psi`` is the probit-scale effect ``phi``; ``extras`` carries the
    logit-scale conversion ``phi / 0.6071`` with its standard error and
    interval, and a flag when the outcome mean lies outside 10%-90%, where
    that conversion is unreliable.
    """
    fs = fit_first_stage(data, first_stage, "all", t_floor)
    if "z" not in fs.fit.names:
        raise FormulaError("first stage needs a linear main effect of z")
    assoc_spec = _as_spec(assoc_spec, ModelSpec((INTERCEPT, Term("main", ("x",)), Term("main", ("z",)), *_cov_terms(data)), "probit", "y"), "probit")
    reduced_spec = _as_spec(reduced_spec, ModelSpec((INTERCEPT, Term("main", ("z",)), *_cov_terms(data)), "probit", "y"), "probit")
    if assoc_spec.link != "probit" or reduced_spec.link != "probit":
        raise FormulaError("association and reduced-form models must use the probit link")
    fa = fit_glm(data, assoc_spec)
    fr = fit_glm(data, reduced_spec)
    if "x" not in fa.names or "z" not in fr.names:
        raise FormulaError("association model needs x and the reduced model needs z")
    frame = data.frame()
    G, A, R = fs.G, build_design(assoc_spec, frame).matrix, build_design(reduced_spec, frame).matrix
    p1, pa, pr = G.shape[1], A.shape[1], R.shape[1]
    s1, s_sig, sa, sr = slice(0, p1), slice(p1, p1 + 1), slice(p1 + 1, p1 + 1 + pa), slice(p1 + 1 + pa, p1 + 1 + pa + pr)
    resid = data.x - G @ fs.fit.beta
    sigma2 = float(np.mean(resid**2))

    def sig_scores(theta):
        return ((data.x - G @ theta[s1]) ** 2 - theta[s_sig][0])[:, None]

    def sig_jac(theta, w):
        out = np.zeros((1, theta.size))
        out[0, s1] = -2.0 * (w * (data.x - G @ theta[s1])) @ G
        out[0, s_sig] = -w.sum()
        return out

    blocks = (
        _first_block(fs, data.x, s1),
        ScoreBlock("sigma2", 1, sig_scores, sig_jac),
        glm_block("association", A, data.y, "probit", sa),
        glm_block("reduced", R, data.y, "probit", sr),
    )
    theta = np.concatenate([fs.fit.beta, [sigma2], fa.beta, fr.beta])
    stack = ScoreStack(blocks, theta, None)
    cov = sandwich_cov(stack)
    ia = fs.fit.names.index("z")
    it1 = p1 + 1 + fa.names.index("x")
    il = p1 + 1 + pa + fr.names.index("z")
    alpha1, theta1, lam1 = theta[ia], theta[it1], theta[il]
    phi = probit_normal_ratio(lam1, theta1, sigma2, alpha1)
    root = np.sqrt(1.0 + theta1 * theta1 * sigma2)
    grad = np.zeros(theta.size)
    grad[il] = root / alpha1
    grad[it1] = lam1 * theta1 * sigma2 / (root * alpha1)
    grad[p1] = lam1 * theta1 * theta1 / (2.0 * root * alpha1)
    grad[ia] = -phi / alpha1
    se = float(np.sqrt(grad @ cov @ grad))
    lo, hi, p = _wald(phi, se)
    ybar = float(data.y.mean())
    out_of_range = not (0.1 <= ybar <= 0.9)
    if out_of_range:
        warnings.warn(
            f"outcome mean {ybar:.3f} outside [0.1, 0.9]; the probit-to-logit conversion is unreliable",
            OutcomeMeanOutOfRange,
            stacklevel=2,
        )
    extras = {
        "phi": phi,
        "psi_logit": phi / PROBIT_LOGIT_SCALE,
        "se_logit": se / PROBIT_LOGIT_SCALE,
        "ci_logit": [float(lo) / PROBIT_LOGIT_SCALE, float(hi) / PROBIT_LOGIT_SCALE],
        "outcome_mean": ybar,
        "outcome_mean_out_of_range": out_of_range,
        "alpha1": float(alpha1),
        "theta1": float(theta1),
        "lambda1": float(lam1),
        "sigma2": sigma2,
    }
    names = (
        tuple(f"first:{n}" for n in fs.fit.names) + ("sigma2",)
        + tuple(f"assoc:{n}" for n in fa.names) + tuple(f"reduced:{n}" for n in fr.names)
    )
    return CausalFit(
        phi, se, float(lo), float(hi), float(p), "ProbitNormalSMM",
        nuisance={"first_stage": fs.fit, "association": fa, "reduced": fr},
        param_names=names, vcov=cov, extras=extras,
    )
