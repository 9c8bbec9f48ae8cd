import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize, stats
from scipy.special import expit, logit

from ivodds.data import Dataset
from ivodds.errors import NonBinaryResponse, RankDeficient, Separation, SpecMismatch
from ivodds.formula import build_design, parse_formula
from ivodds.glm import SCORE_TOL, fit_arrays, fit_glm, predict_mean, score_slope, score_terms
from ivodds.links import norm_cdf
from ivodds.variance import glm_block, numeric_jacobian


def _binary_data(rng, n=400, link="logit"):
    x = rng.normal(size=n)
    z = rng.binomial(1, 0.4, size=n).astype(float)
    eta = -0.3 + 0.8 * x - 0.5 * z
    p = expit(eta) if link == "logit" else stats.norm.cdf(eta)
    y = (rng.random(n) < p).astype(float)
    return Dataset(y, x, z)


def test_intercept_only_logit_matches_closed_form():
    y = np.array([1.0, 0, 0, 0] * 25)
    fit = fit_glm(Dataset(y, np.zeros(100), np.zeros(100)), parse_formula("y ~ 1"))
    assert fit.beta[0] == pytest.approx(logit(0.25), abs=1e-12)
    assert fit.beta[0] == pytest.approx(-1.0986122886681098, abs=1e-12)


def test_saturated_fit_reproduces_cell_frequencies(brookhart, brookhart_data):
    spec = parse_formula("y ~ x + z + x:z")
    fit = fit_glm(brookhart_data, spec)
    frame = {"x": np.array([0.0, 0, 1, 1]), "z": np.array([0.0, 1, 0, 1]), "y": np.zeros(4)}
    got = predict_mean(fit, frame, spec)
    a = brookhart.array
    want = [a[x, z, 1] / a[x, z].sum() for x, z in ((0, 0), (0, 1), (1, 0), (1, 1))]
    np.testing.assert_allclose(got, want, rtol=1e-10)
    assert got[3] == pytest.approx(114 / 19607, rel=1e-10)


def test_constant_response_is_separation():
    n = 50
    with pytest.raises(Separation):
        fit_glm(Dataset(np.ones(n), np.arange(n, dtype=float), np.zeros(n)), parse_formula("y ~ x"))


def test_perfectly_separated_design_is_separation():
    x = np.arange(-10, 10, dtype=float)
    y = (x > 0).astype(float)
    with pytest.raises(Separation):
        fit_glm(Dataset(y, x, np.zeros_like(x)), parse_formula("y ~ x"))


def test_nonbinary_response_for_logit(rng):
    d = _binary_data(rng)
    with pytest.raises(NonBinaryResponse):
        fit_glm(d, parse_formula("x ~ z"), response="x")


def test_collinear_design_is_rank_deficient(rng):
    d = _binary_data(rng)
    d = d.with_columns(c1=2.0 * d.x)
    with pytest.raises(RankDeficient):
        fit_glm(d, parse_formula("y ~ x + c1"))


def test_predictions_at_zero_linear_predictor():
    d = Dataset(np.array([0.0, 1.0]), np.zeros(2), np.zeros(2))
    fit = fit_glm(d, parse_formula("y ~ 1"))
    assert fit.beta[0] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(predict_mean(fit, d, parse_formula("y ~ 1")), 0.5)
    assert norm_cdf(0.0) == 0.5
    pfit = fit_glm(d, parse_formula("y ~ 1", "probit"))
    np.testing.assert_allclose(predict_mean(pfit, d, parse_formula("y ~ 1", "probit")), 0.5, atol=1e-12)


def test_linear_first_stage_gives_group_means(rng):
    d = _binary_data(rng)
    spec = parse_formula("x ~ z", "identity")
    fit = fit_glm(d, spec, response="x")
    pred = predict_mean(fit, {"z": np.array([0.0, 1.0]), "x": np.zeros(2)}, spec)
    np.testing.assert_allclose(pred, [d.x[d.z == 0].mean(), d.x[d.z == 1].mean()], rtol=1e-10)


def test_predict_refuses_other_spec(rng):
    d = _binary_data(rng)
    fit = fit_glm(d, parse_formula("y ~ x"))
    with pytest.raises(SpecMismatch):
        predict_mean(fit, d, parse_formula("y ~ x + z"))


@pytest.mark.parametrize("link", ["logit", "probit"])
def test_mle_matches_direct_likelihood_maximisation(rng, link):
    d = _binary_data(rng, 600, link)
    spec = parse_formula("y ~ x + z", link)
    fit = fit_glm(d, spec)
    X = build_design(spec, d.frame()).matrix
    cdf = expit if link == "logit" else norm_cdf

    def nll(b):
        p = np.clip(cdf(X @ b), 1e-15, 1 - 1e-15)
        return -np.sum(d.y * np.log(p) + (1 - d.y) * np.log1p(-p))

    ref = optimize.minimize(nll, np.zeros(3), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000, "maxfev": 40000})
    np.testing.assert_allclose(fit.beta, ref.x, atol=1e-5)
    assert fit.converged and fit.score_norm < SCORE_TOL


def test_ols_recovers_noiseless_coefficients(rng):
    n = 50
    x = rng.normal(size=n)
    z = rng.normal(size=n)
    d = Dataset(np.zeros(n), x, z, {"w": 1.5 - 2.0 * x + 0.25 * z})
    fit = fit_glm(d, parse_formula("w ~ x + z", "identity"))
    np.testing.assert_allclose(fit.beta, [1.5, -2.0, 0.25], atol=1e-10)


def test_vcov_symmetric_psd(rng):
    fit = fit_glm(_binary_data(rng), parse_formula("y ~ x + z"))
    v = np.asarray(fit.vcov_model)
    np.testing.assert_allclose(v, v.T)
    assert np.linalg.eigvalsh(v).min() >= 0


@given(st.integers(0, 2**32 - 1), st.sampled_from(["logit", "probit"]))
def test_score_vanishes_at_solution(seed, link):
    rng = np.random.default_rng(seed)
    d = _binary_data(rng, 300, link)
    spec = parse_formula("y ~ x + z", link)
    fit = fit_glm(d, spec)
    X = build_design(spec, d.frame()).matrix
    s = score_terms(link, X, d.y, X @ fit.beta).mean(axis=0)
    assert np.max(np.abs(s)) < SCORE_TOL


@given(st.integers(0, 2**32 - 1), st.sampled_from(["logit", "probit", "identity"]))
def test_observed_information_matches_finite_differences(seed, link):
    rng = np.random.default_rng(seed)
    n, p = 60, 3
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    y = rng.binomial(1, 0.4, size=n).astype(float) if link != "identity" else rng.normal(size=n)
    theta = rng.normal(scale=0.5, size=p)
    block = glm_block("b", X, y, link, slice(0, p))
    analytic = block.jacobian(theta, np.ones(n))
    numeric = numeric_jacobian(lambda t: block.scores(t).sum(axis=0), theta)
    scale = np.max(np.abs(analytic))
    assert np.max(np.abs(analytic - numeric)) / scale < 1e-5
    # the slope helper is the same derivative written per observation
    c = score_slope(link, y, X @ theta)
    np.testing.assert_allclose(X.T @ (X * c[:, None]), analytic, rtol=1e-12, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_saturated_binary_design_reproduces_cells(seed):
    rng = np.random.default_rng(seed)
    n = 400
    x = rng.binomial(1, 0.5, n).astype(float)
    z = rng.binomial(1, 0.5, n).astype(float)
    y = rng.binomial(1, 0.2 + 0.3 * x * z + 0.2 * z, n).astype(float)
    cells = [(a, b) for a in (0, 1) for b in (0, 1)]
    if any(len(set(y[(x == a) & (z == b)])) < 2 for a, b in cells):
        return
    spec = parse_formula("y ~ x + z + x:z")
    fit = fit_glm(Dataset(y, x, z), spec)
    mu = predict_mean(fit, Dataset(y, x, z), spec)
    for a, b in cells:
        m = (x == a) & (z == b)
        assert mu[m][0] == pytest.approx(y[m].mean(), abs=1e-9)


def test_weights_equal_replication(rng):
    d = _binary_data(rng, 80)
    w = rng.integers(1, 4, size=80)
    spec = parse_formula("y ~ x + z")
    fw = fit_glm(d, spec, weights=w)
    rep = np.repeat(np.arange(80), w)
    fr = fit_glm(Dataset(d.y[rep], d.x[rep], d.z[rep]), spec)
    np.testing.assert_allclose(fw.beta, fr.beta, atol=1e-9)


def test_fit_arrays_rejects_negative_weights():
    X = np.ones((3, 1))
    with pytest.raises(ValueError):
        fit_arrays(X, np.array([0.0, 1, 1]), "logit", np.array([1.0, -1, 1]))
