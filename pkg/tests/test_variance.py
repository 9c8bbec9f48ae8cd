import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from ivodds.data import Dataset
from ivodds.errors import SingularBread
from ivodds.formula import build_design, parse_formula
from ivodds.glm import fit_glm
from ivodds.iv import build_smm_problem, smm_stack, solve_psi
from ivodds.variance import (
    ScoreBlock,
    ScoreStack,
    glm_block,
    influence_matrix,
    influence_se,
    numeric_jacobian,
    sandwich_cov,
    stack_from,
)

from _helpers import confounded_data


def _logit_stack(d, spec):
    fit = fit_glm(d, spec)
    X = build_design(spec, d.frame()).matrix
    return stack_from([glm_block("b", X, d.y, spec.link, slice(0, X.shape[1]))], fit.beta), fit


def test_intercept_only_sandwich_is_binomial():
    y = np.r_[np.ones(30), np.zeros(70)]
    d = Dataset(y, np.zeros(100), np.zeros(100))
    stack, fit = _logit_stack(d, parse_formula("y ~ 1"))
    se = np.sqrt(sandwich_cov(stack)[0, 0])
    assert se == pytest.approx(np.sqrt(1 / (100 * 0.3 * 0.7)), rel=1e-10)


def test_constant_influence_has_zero_se():
    assert influence_se(np.full(50, 3.2)) == 0.0


def test_influence_se_of_logit_mean():
    rng = np.random.default_rng(3)
    y = rng.binomial(1, 0.3, size=500).astype(float)
    yb = y.mean()
    inf = (y - yb) / (yb * (1 - yb))
    # delta method for logit(ybar) with the 1/n variance of a Bernoulli mean
    assert influence_se(inf) == pytest.approx(1 / np.sqrt(500 * yb * (1 - yb)), rel=1e-12)


def test_weighted_influence_se_equals_replication():
    rng = np.random.default_rng(4)
    v = rng.normal(size=30)
    w = rng.integers(1, 5, size=30)
    assert influence_se(v, w) == pytest.approx(influence_se(np.repeat(v, w)), rel=1e-12)


def test_sandwich_close_to_model_based_under_true_model():
    rng = np.random.default_rng(5)
    n = 100_000
    x = rng.normal(size=n)
    z = rng.binomial(1, 0.5, size=n).astype(float)
    y = (rng.random(n) < expit(-0.5 + 0.7 * x + 0.4 * z)).astype(float)
    stack, fit = _logit_stack(Dataset(y, x, z), parse_formula("y ~ x + z"))
    sw = sandwich_cov(stack)
    mb = np.asarray(fit.vcov_model)
    np.testing.assert_allclose(np.diag(sw), np.diag(mb), rtol=0.2)
    off = ~np.eye(3, dtype=bool)
    assert np.all(np.abs(sw[off] - mb[off]) <= 0.2 * np.sqrt(np.outer(np.diag(mb), np.diag(mb)))[off])


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0), st.sampled_from(["logit", "identity"]))
def test_affine_equivariance(seed, k, link):
    rng = np.random.default_rng(seed)
    n = 200
    x = rng.normal(size=n)
    z = rng.binomial(1, 0.5, size=n).astype(float)
    if link == "logit":
        resp = (rng.random(n) < expit(0.3 * x - 0.2 * z)).astype(float)
    else:
        resp = 1 + x + rng.normal(size=n)
    cov = {"r": resp}
    spec = parse_formula("r ~ x + z", link)
    d1 = Dataset(np.zeros(n), x, z, cov)
    d2 = Dataset(np.zeros(n), k * x, z, cov)

    def se(d):
        fit = fit_glm(d, spec)
        X = build_design(spec, d.frame()).matrix
        stack = stack_from([glm_block("b", X, resp, link, slice(0, 3))], fit.beta)
        return np.sqrt(np.diag(sandwich_cov(stack)))

    s1, s2 = se(d1), se(d2)
    assert s2[1] == pytest.approx(s1[1] / k, rel=1e-6)
    assert s2[2] == pytest.approx(s1[2], rel=1e-6)


@given(st.integers(0, 2**32 - 1))
def test_sandwich_is_psd_for_arbitrary_stacks(seed):
    rng = np.random.default_rng(seed)
    n, p = 25, 4
    X = rng.normal(size=(n, p))
    A = rng.normal(size=(p, p)) + 3 * np.eye(p)

    block = ScoreBlock("lin", p, lambda t: X * (X @ t)[:, None] + rng.normal(size=(n, p)) * 0,
                       lambda t, w: (X * w[:, None]).T @ X @ A / n)
    stack = ScoreStack((block,), rng.normal(size=p))
    cov = sandwich_cov(stack)
    np.testing.assert_allclose(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-12


def test_singular_bread():
    n = 20
    block = ScoreBlock("flat", 2, lambda t: np.ones((n, 2)), lambda t, w: np.zeros((2, 2)))
    with pytest.raises(SingularBread):
        sandwich_cov(ScoreStack((block,), np.zeros(2)))


def test_block_widths_must_add_up():
    block = ScoreBlock("a", 2, lambda t: np.zeros((3, 2)))
    with pytest.raises(ValueError):
        ScoreStack((block,), np.zeros(3))


def test_numeric_fallback_matches_analytic():
    rng = np.random.default_rng(8)
    d = confounded_data(rng, 300, psi=0.5)
    spec = parse_formula("y ~ x + z")
    stack, _ = _logit_stack(d, spec)
    no_jac = ScoreStack(tuple(ScoreBlock(b.name, b.width, b.scores) for b in stack.blocks), stack.theta)
    np.testing.assert_allclose(sandwich_cov(no_jac), sandwich_cov(stack), rtol=1e-5)
    with pytest.raises(ValueError):
        no_jac.jacobian("analytic")


@given(st.integers(0, 2**32 - 1))
def test_smm_stack_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d = confounded_data(rng, 300, psi=0.5, bz=0.0)
    prob = build_smm_problem(d, "y ~ x + z + x:z", allow_uncongenial=True)
    psi = rng.normal(scale=0.5)
    stack = smm_stack(prob, psi)
    analytic = stack.jacobian("analytic")
    numeric = numeric_jacobian(lambda t: stack._w(d.n) @ stack.scores(t), stack.theta)
    scale = np.max(np.abs(analytic))
    assert np.max(np.abs(analytic - numeric)) / scale < 1e-5


def test_stacked_blocks_vanish_at_solution():
    rng = np.random.default_rng(9)
    d = confounded_data(rng, 800, psi=0.4)
    prob = build_smm_problem(d, "y ~ x + z", allow_uncongenial=True)
    psi, _ = solve_psi(prob)
    stack = smm_stack(prob, psi)
    assert np.max(np.abs(stack.total())) < 1e-6 * d.n
    inf = influence_matrix(stack)
    assert inf.shape == (d.n, stack.dim)
    np.testing.assert_allclose(inf.T @ inf / d.n**2, sandwich_cov(stack), rtol=1e-8, atol=1e-14)
