"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
implementations are. Set ``IVODDS_KERNEL=numpy`` to force the fallback.
"""

from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _pykernels

try:  # pragma: no cover - depends on the build
    from . import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

BACKENDS: dict[str, ModuleType] = {"numpy": _pykernels}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels


def _default() -> str:
    forced = os.environ.get("IVODDS_KERNEL", "").strip().lower()
    if forced:
        if forced not in BACKENDS:
            raise ImportError(f"kernel backend {forced!r} unavailable; have {sorted(BACKENDS)}")
        return forced
    return "cython" if "cython" in BACKENDS else "numpy"


BACKEND = _default()


def get_backend(name: str | None = None) -> ModuleType:
    return BACKENDS[name or BACKEND]


def _c(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=float)


def ee_value(lin, xs, r, psi, backend: str | None = None) -> float:
    return float(get_backend(backend).ee_value(_c(lin), _c(xs), _c(r), float(psi)))


def ee_value_deriv(lin, xs, r, psi, backend: str | None = None) -> tuple[float, float]:
    v, d = get_backend(backend).ee_value_deriv(_c(lin), _c(xs), _c(r), float(psi))
    return float(v), float(d)


def ee_grid(lin, xs, r, grid, backend: str | None = None) -> np.ndarray:
    return np.asarray(get_backend(backend).ee_grid(_c(lin), _c(xs), _c(r), _c(grid)))


def brent(lin, xs, r, a, b, xtol=1e-12, maxiter=200, backend: str | None = None) -> tuple[float, int]:
    root, it = get_backend(backend).brent(_c(lin), _c(xs), _c(r), float(a), float(b), float(xtol), int(maxiter))
    return float(root), int(it)


__all__ = ["BACKEND", "BACKENDS", "get_backend", "ee_value", "ee_value_deriv", "ee_grid", "brent"]
