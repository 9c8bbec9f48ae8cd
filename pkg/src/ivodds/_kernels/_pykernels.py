"""Numpy implementations of the estimating-function kernels."""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit


def ee_value(lin, xs, r, psi):
    return float(r @ expit(lin - psi * xs))


def ee_value_deriv(lin, xs, r, psi):
    h = expit(lin - psi * xs)
    return float(r @ h), float(-(r * h * (1.0 - h)) @ xs)


def ee_grid(lin, xs, r, grid):
    grid = np.asarray(grid, dtype=float)
    out = np.empty(grid.size)
    # chunk the grid so the (grid, n) block stays cache sized
    step = max(1, 2_000_000 // max(lin.size, 1))
    for k in range(0, grid.size, step):
        g = grid[k : k + step, None]
        out[k : k + step] = expit(lin[None, :] - g * xs[None, :]) @ r
    return out


def brent(lin, xs, r, a, b, xtol=1e-12, maxiter=200):
    root, info = brentq(lambda p: ee_value(lin, xs, r, p), a, b, xtol=xtol, maxiter=maxiter, full_output=True)
    return root, info.iterations
