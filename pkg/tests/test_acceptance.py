"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a PASS or FAIL line in ``LINES``; ``conftest.py`` prints
them in the terminal summary. Failures are left failing: the tolerances
below are the contract and are not adjusted to the implementation.
"""

import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from ivodds import (
    Dataset,
    adjusted_iv,
    closed_form_binary,
    extended_smm,
    gmm_marginal,
    expand_table,
    load_fixture,
    logistic_smm,
    marginal_contrast,
    probit_normal_smm,
    standard_iv,
    unadjusted_logistic,
)
from ivodds.errors import Nonconvergence
from ivodds.iv import PROBIT_LOGIT_SCALE, _table_rows, build_smm_problem, smm_stack, solve_psi
from ivodds.simulation.dgp import DGPConfig
from ivodds.simulation.harness import run_experiment
from ivodds.simulation.report import to_json
from ivodds.variance import numeric_jacobian

from _helpers import confounded_data, model_table

pytestmark = pytest.mark.slow

LINES: list[str] = []
REPS = 1000
SEED = 1
TABLE3_CELLS = [(0.1, 0.0), (0.05, 1.0), (0.1, 1.0), (0.25, 1.0), (0.5, 1.0)]


def record(number, checks):
    """Log one line per criterion and fail with the unmet checks."""
    bad = [name for name, ok in checks if not ok]
    status = "PASS" if not bad else "FAIL"
    detail = "; ".join(f"{name}={'ok' if ok else 'MISS'}" for name, ok in checks)
    LINES.append(f"criterion {number}: {status}  {detail}")
    assert not bad, f"criterion {number} unmet: {bad}"


def sig2(v):
    return float(f"{v:.2g}")


@lru_cache(maxsize=None)
def cell(experiment, ey, psi, exact=False, convention="variance2"):
    ests = ["StandardIV", "AdjustedIV", "LogisticSMM", "MLOR1Approx"] + (["MLOR1"] if exact else [])
    cfg = DGPConfig(experiment, n=1000, psi_true=psi, target_ey=ey, seed=SEED, normal_variance_convention=convention)
    return run_experiment(cfg, REPS, ests)


def within_mc(c, target, k=3.0):
    # bias and targets on the x100 scale
    return abs(100 * c.bias - target) <= k * 100 * c.mc_se_bias


# -- 1 ----------------------------------------------------------------------------


def test_criterion_1_published_table():
    t0 = time.perf_counter()
    table = load_fixture("brookhart")
    data = expand_table(table)
    checks = []
    for name, fit in (("standard_iv", standard_iv(data)), ("adjusted_iv", adjusted_iv(data))):
        checks.append((f"{name}_or", sig2(np.exp(fit.psi)) == 0.26))
        checks.append((f"{name}_ci", (sig2(np.exp(fit.ci_low)), sig2(np.exp(fit.ci_high))) == (0.084, 0.79)))
        checks.append((f"{name}_p", sig2(fit.p_value) == 0.018))
    for name, fit in (("logistic_smm", logistic_smm(data)), ("closed_form", closed_form_binary(table))):
        checks.append((f"{name}_or", sig2(np.exp(fit.psi)) == 0.081))
        checks.append((f"{name}_ci", (sig2(np.exp(fit.ci_low)), sig2(np.exp(fit.ci_high))) == (0.0095, 0.82)))
    eff = marginal_contrast(extended_smm(data, mode="approximate"), data)
    checks.append(("marginal_or", sig2(eff.odds_ratio) == 0.083))
    checks.append(("marginal_ci", (sig2(np.exp(eff.ci[0])), sig2(np.exp(eff.ci[1]))) == (0.0096, 0.82)))
    un = unadjusted_logistic(data)
    checks.append(("unadjusted_or", sig2(np.exp(un.psi)) == 1.1 and f"{np.exp(un.psi):.3g}" == "1.12"))
    checks.append(("unadjusted_ci", (sig2(np.exp(un.ci_low)), sig2(np.exp(un.ci_high))) == (0.85, 1.5)))
    checks.append(("runtime_lt_1s", time.perf_counter() - t0 < 1.0))
    record(1, checks)


# -- 2 ----------------------------------------------------------------------------


def test_criterion_2_closed_form_oracle():
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    worst, done = 0.0, 0
    while done < 1000:
        t = model_table(rng)
        try:
            cf = closed_form_binary(t, ci="wald")
        except Exception:
            continue
        ds, w = _table_rows(t)
        psi, _ = solve_psi(build_smm_problem(ds, "y ~ x + z", None, None, w))
        worst = max(worst, abs(psi - cf.psi))
        done += 1
    record(2, [("max_gap_lt_1e-8", worst < 1e-8), ("runtime_lt_10s", time.perf_counter() - t0 < 10.0)])


# -- 3 ----------------------------------------------------------------------------


def test_criterion_3_experiment_a():
    t0 = time.perf_counter()
    rep = cell("a", 0.5, 1.0)
    smm, si = rep.cell("LogisticSMM"), rep.cell("StandardIV")
    record(3, [
        ("smm_bias", within_mc(smm, 1.46)),
        ("smm_ese", abs(100 * smm.ese - 12.6) <= 0.15 * 12.6),
        ("smm_coverage", 0.935 <= smm.coverage <= 0.975),
        ("si_bias", within_mc(si, 1.18)),
        ("runtime_lt_5min", time.perf_counter() - t0 < 300),
    ])


# -- 4 ----------------------------------------------------------------------------


def test_criterion_4_experiment_b():
    rep = cell("b", 0.5, 1.0)
    si, adj, smm = rep.cell("StandardIV"), rep.cell("AdjustedIV"), rep.cell("LogisticSMM")
    record(4, [
        ("si_bias", abs(100 * si.bias + 26.0) <= 3.0),
        ("si_coverage_lt_40", si.coverage < 0.40),
        ("adj_bias", abs(100 * adj.bias - 1.28) <= 4.0),
        ("smm_bias", abs(100 * smm.bias - 1.65) <= 4.0),
    ])


# -- 5 ----------------------------------------------------------------------------


def test_criterion_5_experiments_d_and_e():
    d = cell("d", 0.5, 1.0)
    e = cell("e", 0.5, 1.0)
    e_si, e_adj, e_smm = (e.cell(k) for k in ("StandardIV", "AdjustedIV", "LogisticSMM"))
    record(5, [
        ("d_adj_bias_lt_-15", 100 * d.cell("AdjustedIV").bias < -15.0),
        ("d_smm_bias", abs(100 * d.cell("LogisticSMM").bias + 0.07) <= 4.0),
        # "biased" read as a bias beyond Monte Carlo noise; the reference row is
        # biased toward zero for both two-stage estimators
        ("e_si_biased", abs(e_si.bias) > 3 * e_si.mc_se_bias),
        ("e_adj_biased", abs(e_adj.bias) > 3 * e_adj.mc_se_bias),
        ("e_smm_smaller", abs(e_smm.bias) < min(abs(e_si.bias), abs(e_adj.bias))),
    ])


# -- 6 ----------------------------------------------------------------------------


def test_criterion_6_marginal_estimators():
    rep = cell("a", 0.25, 1.0, exact=True)
    approx, exact = rep.cell("MLOR1Approx"), rep.cell("MLOR1")
    checks = [
        ("approx_bias", abs(100 * approx.bias - 0.04) <= 1.0),
        ("exact_bias", abs(100 * exact.bias + 0.16) <= 1.0),
    ]
    for name, c in (("approx", approx), ("exact", exact)):
        checks.append((f"{name}_sse_ese", abs(c.sse / c.ese - 1.0) <= 0.15))
        checks.append((f"{name}_coverage", 0.92 <= c.coverage <= 0.98))
    for exp in ("a", "b"):
        for ey, psi in TABLE3_CELLS:
            r = cell(exp, ey, psi, exact=(exp, ey, psi) == ("a", 0.25, 1.0))
            checks.append((f"ese_order_{exp}_{ey}_{psi:g}", r.cell("MLOR1Approx").ese < r.cell("LogisticSMM").ese))
    record(6, checks)


# -- 7 ----------------------------------------------------------------------------


def test_criterion_7_local_robustness():
    checks = []
    for exposure in ("normal", "skewed"):
        smm, gmm = [], []
        for r in range(200):
            # outcome depends on the confounder only; the outcome model in x and z is misspecified
            d = confounded_data(np.random.default_rng([SEED, r]), 1000, psi=0.0, exposure=exposure)
            smm.append(logistic_smm(d, "y ~ x + z", ci="wald", allow_uncongenial=True).psi)
            try:
                gmm.append(gmm_marginal(d).psi)
            except Nonconvergence:
                pass
        for name, est in (("smm", smm), ("gmm", gmm)):
            est = np.asarray(est)
            mcse = est.std(ddof=1) / np.sqrt(est.size)
            checks.append((f"{name}_{exposure}", abs(est.mean()) <= 3 * mcse))
    record(7, checks)


# -- 8 ----------------------------------------------------------------------------


def test_criterion_8_numerical_properties():
    rng = np.random.default_rng(SEED)
    d = confounded_data(rng, 1000, psi=0.5)
    prob = build_smm_problem(d, "y ~ x + z", allow_uncongenial=True)
    psi, _ = solve_psi(prob)
    stack = smm_stack(prob, psi)
    score_ok = np.max(np.abs(stack.total())) < 1e-8 * d.n
    analytic = stack.jacobian("analytic")
    numeric = numeric_jacobian(lambda t: stack._w(d.n) @ stack.scores(t), stack.theta)
    jac_ok = np.max(np.abs(analytic - numeric)) / np.max(np.abs(analytic)) < 1e-5

    a = cell("a", 0.5, 1.0).cell("LogisticSMM")
    sandwich_ok = abs(a.sse / a.ese - 1.0) < 0.15

    cfg = DGPConfig("a", n=500, seed=7)
    seed_ok = to_json(run_experiment(cfg, 20)) == to_json(run_experiment(cfg, 20))

    fit = extended_smm(d, targets=())
    eff = marginal_contrast(fit, d)
    chain_ok = (
        abs(eff.risk_diff - (eff.mu_high - eff.mu_low)) < 1e-14
        and abs(eff.rel_risk - eff.mu_high / eff.mu_low) < 1e-12 * eff.rel_risk
        and abs(eff.log_or - (stats.logistic.ppf(eff.mu_high) - stats.logistic.ppf(eff.mu_low))) < 1e-12
    )

    n = 100_000
    z = rng.binomial(2, 0.3, n).astype(float)
    x = z + rng.normal(scale=np.sqrt(2.0), size=n)
    y = (rng.random(n) < stats.logistic.cdf(-0.2 + 0.5 * x)).astype(float)
    big = Dataset(y, x, z)
    pr, lg = probit_normal_smm(big), logistic_smm(big, ci="wald")
    pooled = np.hypot(pr.se / PROBIT_LOGIT_SCALE, lg.se)
    probit_ok = abs(pr.extras["psi_logit"] - lg.psi) < 3 * pooled

    record(8, [
        ("score_at_solution", score_ok),
        ("jacobian_vs_fd", jac_ok),
        ("sandwich_vs_empirical", sandwich_ok),
        ("seed_determinism", seed_ok),
        ("identity_chain", chain_ok),
        ("probit_conversion", probit_ok),
    ])


# -- 9 ----------------------------------------------------------------------------


def test_criterion_9_external_targets_documented():
    readme = (Path(__file__).resolve().parents[1] / "README.md").read_text()
    record(9, [(f"readme_lists_{v}", v in readme) for v in ("1.31", "1.28", "4.44", "4.12")])
