"""Compiled kernels for the scalar structural-mean-model estimating function.

U(psi) = sum_i r_i * expit(lin_i - psi * xs_i)

``r`` carries the centered instrument (times any frequency weight), ``lin``
the association-model linear predictor and ``xs`` the exposure shifted by the
reference level.
"""

import numpy as np
from libc.math cimport exp, fabs


cdef inline double _expit(double t) nogil:
    # one exp and a select; branch-free so the loop pipelines
    cdef double e = exp(-fabs(t))
    cdef double num = 1.0 if t >= 0 else e
    return num / (1.0 + e)


cdef double _value(const double[::1] lin, const double[::1] xs, const double[::1] r, double psi) nogil:
    cdef Py_ssize_t i, n = lin.shape[0]
    cdef double acc = 0.0
    for i in range(n):
        acc += r[i] * _expit(lin[i] - psi * xs[i])
    return acc


def ee_value(const double[::1] lin, const double[::1] xs, const double[::1] r, double psi):
    return _value(lin, xs, r, psi)


def ee_value_deriv(const double[::1] lin, const double[::1] xs, const double[::1] r, double psi):
    cdef Py_ssize_t i, n = lin.shape[0]
    cdef double h, val = 0.0, der = 0.0
    with nogil:
        for i in range(n):
            h = _expit(lin[i] - psi * xs[i])
            val += r[i] * h
            der -= r[i] * h * (1.0 - h) * xs[i]
    return val, der


def ee_grid(const double[::1] lin, const double[::1] xs, const double[::1] r, const double[::1] grid):
    cdef Py_ssize_t k, m = grid.shape[0]
    out = np.empty(m)
    cdef double[::1] o = out
    with nogil:
        for k in range(m):
            o[k] = _value(lin, xs, r, grid[k])
    return out


def brent(const double[::1] lin, const double[::1] xs, const double[::1] r,
          double a, double b, double xtol=1e-12, int maxiter=200):
    """Brent's method on a sign-changing bracket; returns ``(root, iterations)``."""
    cdef double fa = _value(lin, xs, r, a)
    cdef double fb = _value(lin, xs, r, b)
    cdef double c, fc, d, e, tol, m, p, q, s, rr, t
    cdef int it = 0
    if fa == 0.0:
        return a, 0
    if fb == 0.0:
        return b, 0
    if (fa > 0) == (fb > 0):
        raise ValueError("bracket does not change sign")
    c = a
    fc = fa
    d = b - a
    e = d
    with nogil:
        while it < maxiter:
            it += 1
            if (fb > 0) == (fc > 0):
                c = a
                fc = fa
                d = b - a
                e = d
            if fabs(fc) < fabs(fb):
                a = b
                b = c
                c = a
                fa = fb
                fb = fc
                fc = fa
            tol = 2.0 * 2.220446049250313e-16 * fabs(b) + 0.5 * xtol
            m = 0.5 * (c - b)
            if fabs(m) <= tol or fb == 0.0:
                break
            if fabs(e) >= tol and fabs(fa) > fabs(fb):
                s = fb / fa
                if a == c:
                    p = 2.0 * m * s
                    q = 1.0 - s
                else:
                    q = fa / fc
                    rr = fb / fc
                    p = s * (2.0 * m * q * (q - rr) - (b - a) * (rr - 1.0))
                    q = (q - 1.0) * (rr - 1.0) * (s - 1.0)
                if p > 0:
                    q = -q
                else:
                    p = -p
                t = 3.0 * m * q - fabs(tol * q)
                if 2.0 * p < t and p < fabs(0.5 * e * q):
                    e = d
                    d = p / q
                else:
                    d = m
                    e = m
            else:
                d = m
                e = m
            a = b
            fa = fb
            if fabs(d) > tol:
                b += d
            elif m > 0:
                b += tol
            else:
                b -= tol
            fb = _value(lin, xs, r, b)
    return b, it
