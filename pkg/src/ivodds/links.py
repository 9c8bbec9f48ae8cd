"""Inverse links and their derivatives.

The normal CDF is evaluated through the complementary error function so the
lower tail keeps full relative precision.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erfc, expit, logit

SQRT2 = np.sqrt(2.0)
INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

# logit-scale clamp used wherever a linear predictor is composed into H
ETA_CLAMP = 30.0


def norm_cdf(x):
    return 0.5 * erfc(-np.asarray(x, dtype=float) / SQRT2)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return INV_SQRT2PI * np.exp(-0.5 * x * x)


def inverse_link(link: str, eta):
    """Mean as a function of the linear predictor."""
    if link == "logit":
        return expit(eta)
    if link == "probit":
        return norm_cdf(eta)
    if link == "identity":
        return np.asarray(eta, dtype=float)
    raise ValueError(f"unknown link {link!r}")


def mu_eta(link: str, eta):
    """Derivative d mu / d eta."""
    if link == "logit":
        p = expit(eta)
        return p * (1.0 - p)
    if link == "probit":
        return norm_pdf(eta)
    if link == "identity":
        return np.ones_like(np.asarray(eta, dtype=float))
    raise ValueError(f"unknown link {link!r}")


__all__ = ["expit", "logit", "norm_cdf", "norm_pdf", "inverse_link", "mu_eta", "ETA_CLAMP"]
