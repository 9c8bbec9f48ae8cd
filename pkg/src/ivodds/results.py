"""Result containers shared by the estimators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .glm import FitResult

Z_975 = 1.959964

ESTIMATORS = (
    "StandardIV",
    "AdjustedIV",
    "LogisticSMM",
    "ClosedFormBinary",
    "ProbitNormalSMM",
    "GMMMarginal",
    "UnadjustedLogistic",
)

MULTIPLICITIES = ("None", "Unique", "Two", "Multiple")


def _num(v):
    """JSON-friendly scalar or list."""
    if v is None:
        return None
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        f = float(a)
        if np.isnan(f):
            return None
        if np.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return [_num(x) for x in a.tolist()]


@dataclass(frozen=True)
class RootDiagnostics:
    """Where the estimating function vanished and how the root was chosen.

    ``implied_ey0`` holds the average counterfactual prediction at each root,
    which helps spot implausible solutions.
    """

    multiplicity: str
    roots: tuple[float, ...]
    bracket: tuple[float, float]
    curve: tuple[tuple[float, float, float], ...] | None = None
    implied_ey0: tuple[float, ...] = ()
    selected: int | None = None
    rule: str = "smallest_abs"
    note: str = ""

    def __post_init__(self):
        roots = tuple(sorted(float(r) for r in self.roots))
        if roots != tuple(float(r) for r in self.roots):
            raise ValueError("roots must be sorted")
        expected = {0: "None", 1: "Unique", 2: "Two"}.get(len(roots), "Multiple")
        if self.multiplicity != expected:
            raise ValueError(f"multiplicity {self.multiplicity!r} inconsistent with {len(roots)} roots")

    @classmethod
    def from_roots(cls, roots, bracket, **kw) -> "RootDiagnostics":
        roots = tuple(sorted(float(r) for r in roots))
        mult = {0: "None", 1: "Unique", 2: "Two"}.get(len(roots), "Multiple")
        return cls(mult, roots, (float(bracket[0]), float(bracket[1])), **kw)

    def to_dict(self, include_curve: bool = True) -> dict[str, Any]:
        out = {
            "multiplicity": self.multiplicity,
            "roots": [_num(r) for r in self.roots],
            "bracket": [_num(b) for b in self.bracket],
            "implied_ey0": [_num(v) for v in self.implied_ey0],
            "selected": self.selected,
            "rule": self.rule,
            "note": self.note,
        }
        if include_curve and self.curve is not None:
            out["curve"] = [[_num(a), _num(b), _num(c)] for a, b, c in self.curve]
        return out


@dataclass(frozen=True, eq=False)
class CausalFit:
    """A causal log odds ratio estimate with its uncertainty.

    ``psi`` is a float for a constant effect and an array when the effect is
    modified by covariates. ``ci_method`` records whether the interval is a
    Wald interval or an inverted score test.
    """

    psi: float | np.ndarray
    se: float | np.ndarray
    ci_low: float | np.ndarray
    ci_high: float | np.ndarray
    p_value: float | np.ndarray
    estimator: str
    diagnostics: RootDiagnostics | None = None
    nuisance: Mapping[str, FitResult] = field(default_factory=dict)
    param_names: tuple[str, ...] = ()
    vcov: np.ndarray | None = None
    ci_method: str = "wald"
    extras: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        lo, p, hi = (np.asarray(v, dtype=float) for v in (self.ci_low, self.psi, self.ci_high))
        if np.any(lo > p + 1e-9 * (1 + np.abs(p))) or np.any(p > hi + 1e-9 * (1 + np.abs(p))):
            raise ValueError("confidence interval must contain the estimate")

    @property
    def odds_ratio(self):
        return np.exp(self.psi)

    def to_dict(self, include_curve: bool = False) -> dict[str, Any]:
        out = {
            "estimator": self.estimator,
            "psi": _num(self.psi),
            "exp_psi": _num(np.exp(self.psi)),
            "se": _num(self.se),
            "ci": [_num(self.ci_low), _num(self.ci_high)],
            "exp_ci": [_num(np.exp(self.ci_low)), _num(np.exp(self.ci_high))],
            "p_value": _num(self.p_value),
            "ci_method": self.ci_method,
            "param_names": list(self.param_names),
            "diagnostics": self.diagnostics.to_dict(include_curve) if self.diagnostics else None,
            "extras": {k: _num(v) if isinstance(v, (int, float, np.floating, np.ndarray)) else v for k, v in self.extras.items()},
        }
        return out
