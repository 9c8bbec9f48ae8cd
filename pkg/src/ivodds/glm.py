"""Linear, logistic and probit regression by iteratively reweighted least squares."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import erfinv

from .data import Dataset
from .errors import MissingColumn, NonBinaryResponse, RankDeficient, Separation, SpecMismatch
from .formula import ModelSpec, build_design, spec_hash
from .links import inverse_link, mu_eta, norm_pdf

MAX_ITER = 100
SCORE_TOL = 1e-10
STEP_TOL = 1e-12
# coefficients still moving by more than this are not considered settled
SETTLE_TOL = 1e-6
SEPARATION_ETA = 30.0


@dataclass(frozen=True, eq=False)
class FitResult:
    """A fitted regression.

    ``score_norm`` is the sup-norm of the weighted mean score at ``beta``.
    ``design_hash`` ties the fit to the model spec (terms, link, factor
    levels) so predictions from a different spec are refused.
    """

    beta: np.ndarray
    vcov_model: np.ndarray
    score_norm: float
    iterations: int
    converged: bool
    design_hash: str
    names: tuple[str, ...]
    link: str
    levels: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    response: str = "y"
    n: int = 0
    sigma2: float | None = None
    trace: tuple[float, ...] = ()

    def __post_init__(self):
        b = np.array(self.beta, dtype=float)
        v = np.array(self.vcov_model, dtype=float)
        b.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "vcov_model", v)

    @property
    def se_model(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov_model), 0.0, None))

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])


# -- per-observation score algebra -----------------------------------------


def score_terms(link: str, X: np.ndarray, y: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Per-observation score contributions, shape (n, p)."""
    return (score_factor(link, y, eta))[:, None] * X


def score_factor(link: str, y, eta) -> np.ndarray:
    """Scalar ``a_i`` with score_i = a_i * x_i."""
    if link == "identity":
        return y - eta
    mu = inverse_link(link, eta)
    if link == "logit":
        return y - mu
    d = mu_eta(link, eta)
    v = np.clip(mu * (1.0 - mu), 1e-300, None)
    return (y - mu) * d / v


def score_slope(link: str, y, eta) -> np.ndarray:
    """Scalar ``c_i`` with d score_i / d beta = c_i * x_i x_i^T."""
    if link == "identity":
        return -np.ones_like(eta)
    mu = inverse_link(link, eta)
    if link == "logit":
        return -mu * (1.0 - mu)
    phi = norm_pdf(eta)
    v = np.clip(mu * (1.0 - mu), 1e-300, None)
    w = phi / v
    dw = -eta * phi / v - phi * phi * (1.0 - 2.0 * mu) / (v * v)
    return -phi * w + (y - mu) * dw


# -- fitting ---------------------------------------------------------------


def _check_rank(X: np.ndarray, names) -> None:
    if X.shape[1] == 0:
        raise RankDeficient("design has no columns")
    scale = np.sqrt((X * X).sum(axis=0))
    if np.any(scale == 0):
        bad = [names[i] for i in np.flatnonzero(scale == 0)]
        raise RankDeficient(f"design column(s) identically zero: {bad}")
    rank = np.linalg.matrix_rank(X / scale, tol=1e-10 * max(X.shape))
    if rank < X.shape[1]:
        raise RankDeficient(f"design matrix has rank {rank} < {X.shape[1]} columns")


def _deviance(link, y, eta, w):
    if link == "identity":
        return float(np.sum(w * (y - eta) ** 2))
    mu = np.clip(inverse_link(link, eta), 1e-300, 1.0 - 1e-16)
    return float(-2.0 * np.sum(w * (y * np.log(mu) + (1.0 - y) * np.log1p(-mu))))


def fit_arrays(
    X: np.ndarray,
    y: np.ndarray,
    link: str = "logit",
    weights: np.ndarray | None = None,
    offset: np.ndarray | None = None,
    names=None,
) -> tuple[np.ndarray, np.ndarray, float, int, bool, float | None, tuple[float, ...]]:
    """Core solver on raw arrays.

    Returns ``(beta, vcov_model, score_norm, iterations, converged, sigma2, trace)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    names = names or tuple(f"b{i}" for i in range(p))
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    _check_rank(X[w > 0], names)
    wsum = w.sum()

    if link == "identity":
        sw = np.sqrt(w)
        beta, *_ = np.linalg.lstsq(X * sw[:, None], (y - off) * sw, rcond=None)
        resid = y - off - X @ beta
        dof = max(wsum - p, 1.0)
        sigma2 = float(np.sum(w * resid**2) / dof)
        xtx = X.T @ (X * w[:, None])
        vcov = sigma2 * np.linalg.inv(xtx)
        score = np.abs(X.T @ (w * resid)).max() / wsum
        return beta, 0.5 * (vcov + vcov.T), float(score), 1, True, sigma2, ()

    if not np.all((y == 0) | (y == 1)):
        raise NonBinaryResponse(f"{link} link needs a binary response")
    pos = w > 0
    if np.all(y[pos] == y[pos][0]):
        raise Separation("response is constant; fitted probabilities pinned at 0 or 1")

    # start from the intercept-only fit projected onto the design
    ybar = np.clip(np.sum(w * y) / wsum, 1e-6, 1 - 1e-6)
    eta0 = np.log(ybar / (1 - ybar)) if link == "logit" else float(np.sqrt(2.0) * erfinv(2 * ybar - 1))
    beta = np.linalg.lstsq(X * np.sqrt(w)[:, None], np.full(n, eta0) * np.sqrt(w), rcond=None)[0]
    eta = off + X @ beta
    dev = _deviance(link, y, eta, w)
    trace = []
    converged = False
    it = 0
    score_norm = np.inf
    for it in range(1, MAX_ITER + 1):
        a = score_factor(link, y, eta)
        grad = X.T @ (w * a)
        # Newton for logit (canonical), Fisher scoring otherwise
        if link == "logit":
            info_w = -score_slope(link, y, eta)
        else:
            d = mu_eta(link, eta)
            mu = inverse_link(link, eta)
            info_w = d * d / np.clip(mu * (1 - mu), 1e-300, None)
        info = X.T @ (X * (w * np.clip(info_w, 1e-300, None))[:, None])
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            eta_c = off + X @ cand
            dev_c = _deviance(link, y, eta_c, w)
            if np.isfinite(dev_c) and dev_c <= dev + 1e-12 * (1 + abs(dev)):
                break
            t *= 0.5
        rel = np.max(np.abs(cand - beta)) / max(1.0, np.max(np.abs(beta)))
        beta, eta, dev = cand, eta_c, dev_c
        score_norm = float(np.abs(X.T @ (w * score_factor(link, y, eta))).max() / wsum)
        trace.append(score_norm)
        if (score_norm < SCORE_TOL and rel < SETTLE_TOL) or rel < STEP_TOL:
            converged = True
            break
    if not converged and np.max(np.abs(eta[pos])) > SEPARATION_ETA:
        raise Separation(
            f"linear predictor reached |eta|={np.max(np.abs(eta[pos])):.1f}; "
            "coefficients diverge (complete or quasi-complete separation)"
        )
    J = X.T @ (X * (w * score_slope(link, y, eta))[:, None])
    try:
        vcov = np.linalg.inv(-J)
    except np.linalg.LinAlgError:
        vcov = np.linalg.pinv(-J)
    return beta, 0.5 * (vcov + vcov.T), score_norm, it, converged, None, tuple(trace)


def fit_glm(
    data: Dataset,
    spec: ModelSpec,
    response: str | None = None,
    weights=None,
) -> FitResult:
    """Maximum-likelihood (or least-squares) fit of ``spec`` on ``data``.

    Parameters
    ----------
    data : Dataset
    spec : ModelSpec
        Terms and link. The response defaults to ``spec.response`` and then ``"y"``.
    response : str, optional
        Column holding the response.
    weights : array_like, optional
        Nonnegative frequency weights.

    Raises
    ------
    RankDeficient, Separation, NonBinaryResponse
    """
    frame = data.frame()
    response = response or spec.response or "y"
    if response not in frame:
        raise MissingColumn(f"response column {response!r} not found")
    design = build_design(spec, frame)
    beta, vcov, score, it, conv, sigma2, trace = fit_arrays(
        design.matrix, frame[response], spec.link, weights, design.offset, design.names
    )
    return FitResult(
        beta=beta,
        vcov_model=vcov,
        score_norm=score,
        iterations=it,
        converged=conv,
        design_hash=spec_hash(spec, design.levels),
        names=design.names,
        link=spec.link,
        levels=dict(design.levels),
        response=response,
        n=data.n,
        sigma2=sigma2,
        trace=trace,
    )


def _check_compatible(fit: FitResult, spec: ModelSpec) -> None:
    if spec_hash(spec, fit.levels) != fit.design_hash:
        raise SpecMismatch(f"fit was produced from a different model than {spec}")


def linear_predictor(fit: FitResult, data: Dataset | Mapping[str, np.ndarray], spec: ModelSpec) -> np.ndarray:
    _check_compatible(fit, spec)
    frame = data.frame() if isinstance(data, Dataset) else data
    design = build_design(spec, frame, fit.levels)
    return design.offset + design.matrix @ fit.beta


def predict_mean(fit: FitResult, data: Dataset | Mapping[str, np.ndarray], spec: ModelSpec) -> np.ndarray:
    """Inverse link of the linear predictor for every row of ``data``."""
    return inverse_link(fit.link, linear_predictor(fit, data, spec))
