"""Shared generators for the test-suite."""

import numpy as np
from scipy.special import expit

from ivodds.data import CountTable2x2x2, Dataset


def model_table(rng, n=None):
    """2x2x2 counts from a confounded binary-instrument model with a real instrument effect."""
    n = int(rng.integers(300, 5000)) if n is None else n
    pz = rng.uniform(0.2, 0.8)
    a0, a1 = rng.normal(0, 1), rng.uniform(1, 3)
    b0, bx, bu = rng.normal(-1, 1), rng.normal(0, 1), rng.uniform(0, 1.5)
    # confounder takes two values so the cell probabilities are exact
    probs = np.zeros((2, 2, 2))
    for u, pu in ((-1.0, 0.5), (1.0, 0.5)):
        for z, pzz in ((0, 1 - pz), (1, pz)):
            px1 = expit(a0 + a1 * z + u)
            for x, pxx in ((0, 1 - px1), (1, px1)):
                py1 = expit(b0 + bx * x + bu * u)
                probs[x, z, 1] += pu * pzz * pxx * py1
                probs[x, z, 0] += pu * pzz * pxx * (1 - py1)
    while True:
        counts = rng.multinomial(n, probs.reshape(-1)).reshape(2, 2, 2)
        if counts.min() > 0:
            return CountTable2x2x2(counts)


def confounded_data(rng, n, psi=0.0, bz=0.0, interaction=0.0, exposure="normal"):
    """Continuous exposure, binary or three-level instrument, unmeasured confounder."""
    z = rng.binomial(2, 0.3, size=n).astype(float)
    u = rng.normal(size=n)
    if exposure == "normal":
        x = z + u + rng.normal(size=n)
    else:
        x = (z + rng.gamma(2.0, 1.0, size=n)) * np.exp(0.3 * u)
    lin = -0.5 + psi * x + bz * z + interaction * x * z + 0.8 * u
    y = (rng.random(n) < expit(lin)).astype(float)
    return Dataset(y, x, z)
