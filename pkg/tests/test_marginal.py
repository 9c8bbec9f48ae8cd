"""Extended structural mean model, marginal contrasts and the moment estimator."""

import dataclasses
from types import MappingProxyType

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit, logit

from ivodds import Dataset, logistic_smm
from ivodds.errors import MissingLevel, NoRootAtLevel, Nonconvergence
from ivodds.iv import SearchConfig
from ivodds.marginal import (
    AdditiveShift,
    FixedLevel,
    FixedLevels,
    MultiplicativeShift,
    Observed,
    ObservedPlusOne,
    assign_levels,
    counterfactual_mean,
    extended_smm,
    gmm_marginal,
    marginal_contrast,
    parse_contrast,
)
from ivodds.simulation.dgp import DGPConfig, calibrate, generate

from _helpers import confounded_data


@pytest.fixture(scope="module")
def brookhart_exact(brookhart_data):
    return extended_smm(brookhart_data, mode="exact")


@pytest.fixture(scope="module")
def brookhart_approx(brookhart_data):
    return extended_smm(brookhart_data, mode="approximate")


# -- per-level parameters ------------------------------------------------------------


def test_level_zero_matches_conditional_estimator(brookhart_data, brookhart_exact):
    assert brookhart_exact.psi(0.0) == pytest.approx(logistic_smm(brookhart_data).psi, abs=1e-9)


def test_level_one_root_solves_its_equation(brookhart_data, brookhart_exact):
    prob = brookhart_exact.problem
    u = prob.U(brookhart_exact.psi(1.0), x_ref=1.0)
    assert abs(float(np.atleast_1d(u)[0])) < 1e-8 * brookhart_data.n


def test_approximate_mode_stores_one_parameter(brookhart_approx):
    assert list(brookhart_approx.psi_by_x) == [0.0]
    assert brookhart_approx.psi(1.0) == brookhart_approx.psi(0.0)


def test_exact_mode_stores_each_level(brookhart_exact):
    assert set(brookhart_exact.psi_by_x) == {0.0, 1.0}
    with pytest.raises(MissingLevel):
        brookhart_exact.psi(0.5)
    with pytest.raises(MissingLevel):
        brookhart_exact.psi_influence(2.0)


def test_invalid_mode(brookhart_data):
    with pytest.raises(ValueError):
        extended_smm(brookhart_data, mode="fast")


def test_no_root_reports_level(brookhart_data):
    with pytest.raises(NoRootAtLevel) as info:
        extended_smm(brookhart_data, search=SearchConfig(lo=1.0, hi=3.0))
    assert info.value.level == 0.0
    assert info.value.to_dict()["level"] == 0.0


# -- counterfactual means and contrasts -------------------------------------------------


def test_observed_target_is_sample_mean(brookhart_data, brookhart_exact):
    assert counterfactual_mean(brookhart_exact, brookhart_data, Observed()) == pytest.approx(brookhart_data.y.mean())


def test_null_effect_mean_ignores_level(brookhart_data, brookhart_exact):
    zero = MappingProxyType({0.0: np.zeros(1), 1.0: np.zeros(1), 2.5: np.zeros(1)})
    fit = dataclasses.replace(brookhart_exact, psi_by_x=zero)
    means = [counterfactual_mean(fit, brookhart_data, FixedLevel(v)) for v in (0.0, 1.0, 2.5)]
    assert means == pytest.approx([means[0]] * 3, abs=1e-15)
    assert means[0] == pytest.approx(expit(fit.problem.lin()).mean())


def test_brookhart_marginal_odds_ratio(brookhart_data, brookhart_approx):
    eff = marginal_contrast(brookhart_approx, brookhart_data)
    assert float(f"{eff.odds_ratio:.2g}") == 0.083


def test_exact_and_approximate_agree_on_binary_exposure(brookhart_data, brookhart_exact, brookhart_approx):
    a = marginal_contrast(brookhart_exact, brookhart_data).log_or
    b = marginal_contrast(brookhart_approx, brookhart_data).log_or
    assert abs(a - b) < 0.05


def test_equal_levels_give_null_contrast(brookhart_data, brookhart_exact):
    eff = marginal_contrast(brookhart_exact, brookhart_data, FixedLevels(1.0, 1.0))
    assert eff.log_or == 0.0 and eff.risk_diff == 0.0 and eff.rel_risk == 1.0


@pytest.fixture(scope="module")
def continuous_case():
    rng = np.random.default_rng(20)
    data = confounded_data(rng, 3000, psi=0.4)
    fit = extended_smm(data, targets=(ObservedPlusOne(), MultiplicativeShift(1.2).targets[1]), bins=8)
    return data, fit


@settings(max_examples=20)
@given(st.sampled_from(["fixed", "plus1", "times"]))
def test_effect_measures_chain(continuous_case, kind):
    data, fit = continuous_case
    contrast = {"fixed": FixedLevels(), "plus1": AdditiveShift(), "times": MultiplicativeShift(1.2)}[kind]
    eff = marginal_contrast(fit, data, contrast)
    assert eff.risk_diff == pytest.approx(eff.mu_high - eff.mu_low, abs=1e-14)
    assert eff.rel_risk == pytest.approx(eff.mu_high / eff.mu_low, rel=1e-12)
    assert eff.log_or == pytest.approx(logit(eff.mu_high) - logit(eff.mu_low), abs=1e-12)
    assert eff.ci[0] < eff.log_or < eff.ci[1]


def test_shift_contrast_uses_observed_mean(continuous_case):
    data, fit = continuous_case
    eff = marginal_contrast(fit, data, AdditiveShift())
    assert eff.mu_low == pytest.approx(data.y.mean())


def test_shift_levels_are_binned(continuous_case):
    data, fit = continuous_case
    # 2 fixed levels plus at most 8 bins for each of the two shifted targets
    assert len(fit.x_levels) <= 2 + 16
    assert set(fit.psi_by_x) == set(fit.x_levels)


def test_assign_levels_keeps_few_values():
    t = np.array([0.0, 1.0, 1.0, 2.0])
    reps, idx = assign_levels(t, bins=5)
    assert reps.tolist() == [0.0, 1.0, 2.0] and np.array_equal(reps[idx], t)


def test_assign_levels_bins_by_quantile():
    t = np.random.default_rng(1).normal(size=1000)
    reps, idx = assign_levels(t, bins=10)
    assert reps.size == 10
    assert np.all(np.bincount(idx) == 100)
    assert np.all(np.diff(reps) > 0)


def test_parse_contrast():
    assert parse_contrast("plus1") == AdditiveShift()
    assert parse_contrast("times1.5") == MultiplicativeShift(1.5)
    assert parse_contrast("fixed:0,2") == FixedLevels(0.0, 2.0)
    assert str(parse_contrast("fixed:0,2")) == "fixed:0,2"
    with pytest.raises(ValueError):
        parse_contrast("minus1")
    with pytest.raises(ValueError):
        AdditiveShift(2.0)


def test_null_effect_estimate_near_zero():
    rng = np.random.default_rng(4)
    data = confounded_data(rng, 20000, psi=0.0)
    fit = extended_smm(data)
    eff = marginal_contrast(fit, data)
    assert abs(eff.log_or) < 3 * eff.se_log_or


@pytest.mark.slow
def test_influence_se_matches_bootstrap():
    rng = np.random.default_rng(11)
    data = confounded_data(rng, 1500, psi=0.5)
    fit = extended_smm(data)
    eff = marginal_contrast(fit, data)
    draws = []
    for _ in range(200):
        i = rng.integers(0, data.n, data.n)
        d = Dataset(data.y[i], data.x[i], data.z[i])
        try:
            draws.append(marginal_contrast(extended_smm(d), d).log_or)
        except Exception:
            continue
    assert len(draws) > 180
    boot = np.std(draws, ddof=1)
    assert eff.se_log_or == pytest.approx(boot, rel=0.25)


def test_risk_scale_intervals(brookhart_data, brookhart_exact):
    eff = marginal_contrast(brookhart_exact, brookhart_data)
    assert eff.ci_risk_diff[0] < eff.risk_diff < eff.ci_risk_diff[1]
    assert eff.ci_rel_risk[0] < eff.rel_risk < eff.ci_rel_risk[1]
    d = eff.to_dict()
    assert d["log_or"] == eff.log_or


# -- moment estimator under additive confounding -------------------------------------------


def test_gmm_with_exposure_as_instrument_is_logistic_fit():
    rng = np.random.default_rng(3)
    x = rng.integers(0, 2, 800).astype(float)
    y = (rng.random(800) < expit(-0.3 + 0.7 * x)).astype(float)
    fit = gmm_marginal(Dataset(y, x, x.copy()))
    p1, p0 = y[x == 1].mean(), y[x == 0].mean()
    assert fit.psi == pytest.approx(logit(p1) - logit(p0), abs=1e-8)


def test_gmm_null_effect():
    cfg = calibrate(DGPConfig("a", n=20000, psi_true=0.0, target_ey=0.5, seed=5))
    y, x, z = generate(cfg)
    fit = gmm_marginal(Dataset(y, x, z))
    assert abs(fit.psi) < 3 * fit.se


def test_gmm_nonconvergence_carries_trace():
    # exposure is pure noise around the instrument's effect on the outcome
    rng = np.random.default_rng(0)
    z = rng.integers(0, 2, 200).astype(float)
    x = rng.normal(size=200) * 1e-6
    y = z.copy()
    with pytest.raises(Nonconvergence) as info:
        gmm_marginal(Dataset(y, x, z))
    assert info.value.trace and "norm" in info.value.trace[0]


@pytest.mark.xfail(strict=True, reason="moment estimator converges in most experiment-b replicates")
def test_gmm_fails_in_most_experiment_b_replicates():
    cfg = calibrate(DGPConfig("b", n=1000, psi_true=1.0, target_ey=0.5, seed=1))
    fails = 0
    for r in range(30):
        try:
            gmm_marginal(Dataset(*generate(cfg, r)))
        except Nonconvergence:
            fails += 1
    assert fails > 15
