"""Data-generating processes for the Monte Carlo experiments.

The instrument counts copies of a minor allele under Hardy-Weinberg
equilibrium. The exposure depends on the instrument through one of five
designs, and the outcome follows

    P(Y = 1 | X, Z) = expit(b0 + bx X + bz Z + bxz X Z)

with ``bx`` chosen so that the untreated counterfactual outcome under the
logistic structural mean model, ``expit(b0 + (bx - psi) X + bz Z + bxz X Z)``,
averages to the same value at every instrument level, and ``b0`` chosen to
hit a target outcome mean. Conditional expectations over the exposure are
computed by numerical integration rather than simulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import optimize, special, stats

from ..errors import BracketFailure, NoExactSolution
from ..links import expit, logit

EXPERIMENTS = ("a", "b", "c", "d", "e")
CONVENTIONS = ("variance2", "sd2")
BETA_Z = {"a": 1.0, "b": 2.0, "c": 2.0, "d": -2.0, "e": 1.0}
Z_LEVELS = (0, 1, 2)
# largest tolerated spread of E{Y(0) | Z = z} across z
CONSTANCY_TOL = 1e-3
GH_NODES = 80


def hwe_probs(p: float) -> np.ndarray:
    """Genotype probabilities ``((1-p)^2, 2p(1-p), p^2)``."""
    if not 0.0 < p < 1.0:
        raise ValueError("allele frequency must lie in (0, 1)")
    return np.array([(1 - p) ** 2, 2 * p * (1 - p), p * p])


@dataclass(frozen=True)
class DGPConfig:
    """One simulation cell.

    ``beta_z`` defaults to the experiment's value; ``beta_0`` and ``beta_x``
    are filled in by :func:`calibrate`.
    """

    experiment: str = "a"
    n: int = 1000
    psi_true: float = 1.0
    target_ey: float = 0.5
    beta_z: float | None = None
    allele_freq: float = 0.3
    normal_variance_convention: str = "variance2"
    interaction_coeff: float = 1.0
    seed: int = 0
    beta_0: float | None = None
    beta_x: float | None = None
    discrepancy: float | None = None
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"experiment must be one of {EXPERIMENTS}")
        if not 0.0 < self.target_ey < 1.0:
            raise ValueError("target outcome mean must lie in (0, 1)")
        if self.n <= 0:
            raise ValueError("n must be positive")
        if self.normal_variance_convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")
        if self.beta_z is None:
            object.__setattr__(self, "beta_z", BETA_Z[self.experiment])

    @property
    def bxz(self) -> float:
        return float(self.interaction_coeff) if self.experiment == "e" else 0.0

    @property
    def calibrated(self) -> bool:
        return self.beta_0 is not None and self.beta_x is not None

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "n": self.n,
            "psi_true": self.psi_true,
            "target_ey": self.target_ey,
            "beta_z": self.beta_z,
            "allele_freq": self.allele_freq,
            "normal_variance_convention": self.normal_variance_convention,
            "interaction_coeff": self.bxz,
            "seed": self.seed,
            "beta_0": self.beta_0,
            "beta_x": self.beta_x,
            "discrepancy": self.discrepancy,
            "flags": list(self.flags),
        }


# -- random generation -----------------------------------------------------------


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Counter-based substream for replicate ``replicate`` of run ``seed``."""
    key = (int(seed) % 2**64) * 2**64 + int(replicate) % 2**64
    return np.random.Generator(np.random.Philox(key=key))


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else replicate_rng(int(seed), 0)


def gen_instrument(n: int, p: float = 0.3, seed=0) -> np.ndarray:
    """Genotype counts in {0, 1, 2}."""
    return _rng(seed).choice(3, size=int(n), p=hwe_probs(p))


def normal_sd(convention: str) -> float:
    """Conditional exposure SD: ``sqrt(2)`` under variance2, 2 under sd2."""
    if convention == "variance2":
        return float(np.sqrt(2.0))
    if convention == "sd2":
        return 2.0
    raise ValueError(f"convention must be one of {CONVENTIONS}")


def gen_exposure(z, experiment: str, convention: str = "variance2", seed=0) -> np.ndarray:
    """Exposure given the instrument.

    Normal with mean ``z`` (a, b, e), ``z`` plus a t variate on 2 degrees of
    freedom (c), or gamma with shape ``z`` and unit scale (d; shape 0 gives
    the point mass at 0).
    """
    z = np.asarray(z, dtype=float)
    rng = _rng(seed)
    if experiment in ("a", "b", "e"):
        return z + normal_sd(convention) * rng.standard_normal(z.size)
    if experiment == "c":
        return z + rng.standard_t(2.0, z.size)
    if experiment == "d":
        out = np.zeros(z.size)
        pos = z > 0
        out[pos] = rng.gamma(z[pos], 1.0)
        return out
    raise ValueError(f"experiment must be one of {EXPERIMENTS}")


def gen_outcome(x, z, config: DGPConfig, seed=0) -> np.ndarray:
    if not config.calibrated:
        raise ValueError("configuration is not calibrated")
    eta = config.beta_0 + config.beta_x * x + config.beta_z * z + config.bxz * x * z
    return (_rng(seed).random(np.size(x)) < expit(eta)).astype(float)


def generate(config: DGPConfig, replicate: int = 0):
    """``(y, x, z)`` for one replicate, from its own substream."""
    rng = replicate_rng(config.seed, replicate)
    z = gen_instrument(config.n, config.allele_freq, rng)
    x = gen_exposure(z, config.experiment, config.normal_variance_convention, rng)
    y = gen_outcome(x, z, config, rng)
    return y, x, z.astype(float)


# -- conditional expectations by quadrature ------------------------------------------


@lru_cache(maxsize=None)
def _gh(n: int = GH_NODES):
    nodes, weights = np.polynomial.hermite_e.hermegauss(n)
    return nodes, weights / weights.sum()


@lru_cache(maxsize=None)
def _t2_rule(n: int = 400):
    # t = tan(u) maps the real line to (-pi/2, pi/2); the t2 density times
    # the Jacobian is smooth and bounded there
    u, w = special.roots_legendre(n)
    u = u * np.pi / 2
    t = np.tan(u)
    w = w * np.pi / 2 * stats.t.pdf(t, 2.0) / np.cos(u) ** 2
    return t, w / w.sum()


@lru_cache(maxsize=None)
def _gamma_rule(shape: int, n: int = 120):
    x, w = special.roots_genlaguerre(n, shape - 1.0)
    return x, w / w.sum()


def cond_mean(f, z: int, experiment: str, convention: str = "variance2") -> float:
    """``E{f(X) | Z = z}`` under the experiment's exposure law."""
    if experiment in ("a", "b", "e"):
        nodes, w = _gh()
        return float(w @ f(z + normal_sd(convention) * nodes))
    if experiment == "c":
        t, w = _t2_rule()
        return float(w @ f(z + t))
    if experiment == "d":
        if z == 0:
            return float(f(np.array(0.0)))
        x, w = _gamma_rule(int(z))
        return float(w @ f(x))
    raise ValueError(f"experiment must be one of {EXPERIMENTS}")


def untreated_means(config: DGPConfig, beta_0: float, beta_x: float) -> np.ndarray:
    """``E{Y(0) | Z = z}`` for z = 0, 1, 2."""
    out = []
    for z in Z_LEVELS:
        slope = beta_x - config.psi_true + config.bxz * z

        def f(x, slope=slope, z=z):
            return expit(beta_0 + slope * x + config.beta_z * z)

        out.append(cond_mean(f, z, config.experiment, config.normal_variance_convention))
    return np.array(out)


def outcome_mean(config: DGPConfig, beta_0: float, beta_x: float) -> float:
    p = hwe_probs(config.allele_freq)
    vals = []
    for z in Z_LEVELS:
        slope = beta_x + config.bxz * z

        def f(x, slope=slope, z=z):
            return expit(beta_0 + slope * x + config.beta_z * z)

        vals.append(cond_mean(f, z, config.experiment, config.normal_variance_convention))
    return float(p @ np.array(vals))


def counterfactual_mean_at(config: DGPConfig, level: float | None = None, shift: float | None = None) -> float:
    """``P{Y(x) = 1}`` for a fixed level, or ``P{Y(X + shift) = 1}``."""
    p = hwe_probs(config.allele_freq)
    vals = []
    for z in Z_LEVELS:
        a = config.beta_x + config.bxz * z

        def f(x, a=a, z=z):
            base = config.beta_0 + a * x + config.beta_z * z
            if level is not None:
                return expit(base - config.psi_true * (x - level))
            return expit(base + config.psi_true * shift)

        vals.append(cond_mean(f, z, config.experiment, config.normal_variance_convention))
    return float(p @ np.array(vals))


def true_mlor(config: DGPConfig, kind: str = "fixed") -> float:
    """True marginal log odds ratio: levels 1 vs 0 (``fixed``) or ``plus1``."""
    if kind == "fixed":
        hi, lo = counterfactual_mean_at(config, level=1.0), counterfactual_mean_at(config, level=0.0)
    elif kind == "plus1":
        hi, lo = counterfactual_mean_at(config, shift=1.0), outcome_mean(config, config.beta_0, config.beta_x)
    else:
        raise ValueError("kind must be 'fixed' or 'plus1'")
    return float(logit(hi) - logit(lo))


# -- calibration --------------------------------------------------------------------


def _location_family(config: DGPConfig) -> bool:
    return config.experiment in ("a", "b", "c") or (config.experiment == "e" and config.bxz == 0.0)


def discrepancy(config: DGPConfig, beta_0: float, beta_x: float) -> float:
    g = untreated_means(config, beta_0, beta_x)
    return float(np.max(np.abs(g - g[0])))


def _moment(config: DGPConfig, beta_0: float, beta_x: float) -> float:
    """Instrument-weighted covariance ``sum_z p_z (z - E Z) E{Y(0) | z}``."""
    p = hwe_probs(config.allele_freq)
    zs = np.array(Z_LEVELS, dtype=float)
    return float(p @ ((zs - p @ zs) * untreated_means(config, beta_0, beta_x)))


def solve_beta_x(config: DGPConfig, beta_0: float | None = None) -> tuple[float, float]:
    """``beta_x`` making the untreated counterfactual mean free of ``z``.

    Returns ``(beta_x, discrepancy)`` where the discrepancy is the spread of
    ``E{Y(0) | Z = z}`` over ``z``. Location families use ``psi - beta_z``
    exactly. Otherwise ``beta_x`` zeroes the instrument covariance of
    ``E{Y(0) | Z}``, which is the population version of the estimating
    equation.
    """
    if _location_family(config):
        return float(config.psi_true - config.beta_z), 0.0
    b0 = float(logit(config.target_ey)) if beta_0 is None else beta_0

    def f(bx):
        return _moment(config, b0, bx)

    lo, hi = config.psi_true - 10.0, config.psi_true + 10.0
    grid = np.linspace(lo, hi, 81)
    vals = np.array([f(g) for g in grid])
    sign = np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)
    if sign.size == 0:
        raise BracketFailure("no beta_x balances the untreated outcome across instrument levels")
    # closest crossing to the location-family value
    guess = config.psi_true - config.beta_z
    j = sign[np.argmin(np.abs(grid[sign] - guess))]
    bx = optimize.brentq(f, grid[j], grid[j + 1], xtol=1e-12)
    return float(bx), discrepancy(config, b0, bx)


def solve_beta_0(config: DGPConfig, beta_x: float) -> float:
    """``beta_0`` giving outcome mean ``config.target_ey``."""
    target = config.target_ey
    if not 0.0 < target < 1.0:
        raise BracketFailure(f"target outcome mean {target} is unattainable")

    def f(b0):
        return outcome_mean(config, b0, beta_x) - target

    lo, hi = -40.0, 40.0
    flo, fhi = f(lo), f(hi)
    if not flo < 0 < fhi:
        raise BracketFailure(f"outcome mean {target} not bracketed by beta_0 in [{lo}, {hi}]")
    return float(optimize.brentq(f, lo, hi, xtol=1e-12))


@lru_cache(maxsize=256)
def _calibrate_cached(config: DGPConfig) -> DGPConfig:
    flags = list(config.flags)
    if _location_family(config):
        bx, _ = solve_beta_x(config)
        b0 = solve_beta_0(config, bx)
        disc = discrepancy(config, b0, bx)
    else:
        b0 = float(logit(config.target_ey))
        bx = config.psi_true - config.beta_z
        for _ in range(100):
            bx_new, _ = solve_beta_x(config, b0)
            b0_new = solve_beta_0(config, bx_new)
            done = abs(bx_new - bx) < 1e-10 and abs(b0_new - b0) < 1e-10
            bx, b0 = bx_new, b0_new
            if done:
                break
        disc = discrepancy(config, b0, bx)
        if disc > CONSTANCY_TOL:
            flags.append(f"no_exact_solution:{disc:.3g}")
    if config.experiment == "d":
        flags.append("gamma_shape0_point_mass")
    return replace(config, beta_0=b0, beta_x=bx, discrepancy=disc, flags=tuple(flags))


def calibrate(config: DGPConfig, strict: bool = False) -> DGPConfig:
    """Fill in ``beta_0`` and ``beta_x``.

    With ``strict=True`` a design whose untreated means cannot be equalized
    across instrument levels raises :class:`NoExactSolution`; otherwise it is
    flagged in ``config.flags``.
    """
    base = replace(config, seed=0, beta_0=None, beta_x=None, discrepancy=None, flags=())
    out = _calibrate_cached(base)
    out = replace(out, seed=config.seed, flags=tuple(config.flags) + out.flags)
    if strict and out.discrepancy > CONSTANCY_TOL:
        raise NoExactSolution(
            f"untreated outcome means differ across instrument levels by {out.discrepancy:.3g}"
        )
    return out
