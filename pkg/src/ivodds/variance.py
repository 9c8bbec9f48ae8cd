"""Sandwich covariance for stacked M-estimators.

Every estimator in the package is the root of a stack of per-subject
estimating functions. A :class:`ScoreBlock` evaluates one piece of the stack
as a function of the full parameter vector, so cross-stage dependence (a
second stage that uses first-stage fitted values, say) is carried by the
off-diagonal blocks of the bread.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import SingularBread
from .glm import score_factor, score_slope

ScoreFn = Callable[[np.ndarray], np.ndarray]
JacFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

COND_LIMIT = 1e14


@dataclass(frozen=True, eq=False)
class ScoreBlock:
    """One block of estimating functions.

    Parameters
    ----------
    name : str
    width : int
        Number of estimating functions (and parameters) in the block.
    scores : callable
        ``scores(theta) -> (n, width)`` per-subject estimating functions.
    jacobian : callable, optional
        ``jacobian(theta, w) -> (width, p)``, the weighted sum over subjects of
        the derivative with respect to the full ``theta``. Central finite
        differences are used when absent.
    """

    name: str
    width: int
    scores: ScoreFn
    jacobian: JacFn | None = None


@dataclass(frozen=True, eq=False)
class ScoreStack:
    blocks: tuple[ScoreBlock, ...]
    theta: np.ndarray
    weights: np.ndarray | None = None
    names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        theta = np.array(self.theta, dtype=float)
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        if sum(b.width for b in self.blocks) != theta.size:
            raise ValueError("block widths do not add up to the parameter dimension")
        if self.names and len(self.names) != theta.size:
            raise ValueError("names must match the parameter dimension")

    @property
    def dim(self) -> int:
        return self.theta.size

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for b in self.blocks:
            out[b.name] = slice(start, start + b.width)
            start += b.width
        return out

    def _eval(self, t: np.ndarray) -> np.ndarray:
        return np.hstack([np.asarray(b.scores(t), dtype=float).reshape(-1, b.width) for b in self.blocks])

    @cached_property
    def _scores_at_theta(self) -> np.ndarray:
        # read-only so the cached array cannot be changed by a caller
        s = self._eval(self.theta)
        s.flags.writeable = False
        return s

    def scores(self, theta: np.ndarray | None = None) -> np.ndarray:
        """Per-subject scores, shape (n, p); evaluated once at ``self.theta``."""
        return self._scores_at_theta if theta is None else self._eval(theta)

    def _w(self, n: int) -> np.ndarray:
        return np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=float)

    def total(self, theta: np.ndarray | None = None) -> np.ndarray:
        s = self.scores(theta)
        return self._w(s.shape[0]) @ s

    def jacobian(self, method: str = "auto") -> np.ndarray:
        """Weighted sum of score derivatives, shape (p, p).

        ``method`` is ``"analytic"`` (every block must supply one), ``"numeric"``
        or ``"auto"`` (analytic where available, numeric otherwise).
        """
        n = self.scores().shape[0]
        w = self._w(n)
        rows = []
        for b in self.blocks:
            if method != "numeric" and b.jacobian is not None:
                rows.append(np.asarray(b.jacobian(self.theta, w), dtype=float).reshape(b.width, self.dim))
            elif method == "analytic":
                raise ValueError(f"block {b.name!r} has no analytic Jacobian")
            else:
                rows.append(numeric_jacobian(lambda t, b=b: w @ b.scores(t), self.theta))
        return np.vstack(rows)


def numeric_jacobian(fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray) -> np.ndarray:
    """Central differences with step ``1e-6 * max(1, |theta_j|)``."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for j in range(theta.size):
        h = 1e-6 * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += h
        tm[j] -= h
        cols.append((np.asarray(fn(tp)) - np.asarray(fn(tm))) / (2 * h))
    return np.column_stack(cols)


def _psd(m: np.ndarray) -> np.ndarray:
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    if np.all(vals >= 0):
        return m
    vals = np.clip(vals, 0.0, None)
    return 0.5 * ((vecs * vals) @ vecs.T + ((vecs * vals) @ vecs.T).T)


def bread_inverse(stack: ScoreStack, method: str = "auto") -> np.ndarray:
    n = stack.scores().shape[0]
    wsum = stack._w(n).sum()
    bread = stack.jacobian(method) / wsum
    try:
        cond = np.linalg.cond(bread)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularBread(f"bread matrix is singular (condition number {cond:.3g})")
    return np.linalg.inv(bread)


def influence_matrix(stack: ScoreStack, method: str = "auto") -> np.ndarray:
    """Per-subject influence functions ``-B^{-1} S_i``, shape (n, p)."""
    binv = bread_inverse(stack, method)
    return -stack.scores() @ binv.T


def sandwich_cov(stack: ScoreStack, data=None, method: str = "auto") -> np.ndarray:
    """Empirical sandwich ``B^{-1} M B^{-T} / N``.

    ``B`` is the weighted mean Jacobian and ``M`` the weighted mean outer
    product of the stacked scores (``1/N`` normalization, no small-sample
    correction). The result is symmetrized and its eigenvalues floored at 0.
    ``data`` is accepted for call-site symmetry and unused; the stack
    already closes over the observations.
    """
    s = stack.scores()
    w = stack._w(s.shape[0])
    wsum = w.sum()
    binv = bread_inverse(stack, method)
    meat = (s * w[:, None]).T @ s / wsum
    return _psd(binv @ meat @ binv.T / wsum)


def influence_se(influence, weights=None) -> float:
    """Standard error ``sqrt(var(IF) / n)`` with a ``1/n`` variance."""
    v = np.asarray(influence, dtype=float).reshape(-1)
    if np.ptp(v) == 0:
        return 0.0
    if weights is None:
        return float(np.sqrt(np.var(v) / v.size))
    w = np.asarray(weights, dtype=float)
    wsum = w.sum()
    mean = w @ v / wsum
    return float(np.sqrt(w @ (v - mean) ** 2 / wsum / wsum))


# -- common blocks ----------------------------------------------------------


def glm_block(
    name: str,
    design: Callable[[np.ndarray], np.ndarray] | np.ndarray,
    y: np.ndarray,
    link: str,
    sl: slice,
    offset: Callable[[np.ndarray], np.ndarray] | np.ndarray | None = None,
) -> ScoreBlock:
    """Score block of a GLM whose coefficients sit at ``theta[sl]``.

    ``design`` and ``offset`` may be fixed arrays or functions of the full
    parameter vector (for designs built from earlier-stage estimates). The
    analytic Jacobian is provided only when both are fixed.
    """
    y = np.asarray(y, dtype=float)
    fixed = not callable(design) and (offset is None or not callable(offset))

    def _x(theta):
        return design(theta) if callable(design) else design

    def _off(theta):
        if offset is None:
            return 0.0
        return offset(theta) if callable(offset) else offset

    def scores(theta):
        X = _x(theta)
        eta = _off(theta) + X @ theta[sl]
        return score_factor(link, y, eta)[:, None] * X

    jac = None
    if fixed:
        X0 = np.asarray(design, dtype=float)

        def jac(theta, w):
            eta = _off(theta) + X0 @ theta[sl]
            c = score_slope(link, y, eta)
            out = np.zeros((X0.shape[1], theta.size))
            out[:, sl] = X0.T @ (X0 * (w * c)[:, None])
            return out

    return ScoreBlock(name, sl.stop - sl.start, scores, jac)


def stack_from(blocks: Sequence[ScoreBlock], theta, weights=None, names=()) -> ScoreStack:
    return ScoreStack(tuple(blocks), np.asarray(theta, dtype=float), weights, tuple(names))
