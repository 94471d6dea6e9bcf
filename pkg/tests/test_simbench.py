import math

import numpy as np
import pytest

import idisurv.simbench as sb
from idisurv.errors import ConfigError, EmptyGroupError, IdiError, StudyFailure
from idisurv.simbench import (McStudy, ScenarioParams, draw_superpopulation, gen_population,
                              piecewise_exponential_time, power_csv, power_curve, run_mc_study,
                              table_csv, true_marginal_effect)
from oracles import kolmogorov_distance

N = 100_000


def _single_arm_r_cdf(params, r):
    """CDF of accepted R in Case 1 by quadrature over the covariate law.

    For fixed x the density of accepted R is proportional to
    ``P(G=1|x) exp(-lambda_x r)`` on ``[0, upper]``.
    """
    nodes, wts = np.polynomial.hermite_e.hermegauss(60)
    wts = wts / wts.sum()
    b0, b1, b2 = params.beta
    g1, g2 = params.gamma
    upper = params.r_upper

    def mass(u):
        total = np.zeros(u.size)
        x2 = 0.3 * nodes
        for x1 in (0.0, 1.0):
            pg = 1 / (1 + np.exp(-(b0 + b1 * x1 + b2 * x2)))
            lam = params.lambda0 * np.exp(g1 * x1 + g2 * x2)
            # integral of exp(-lam s) over [0, u], averaged over the x2 nodes
            inner = (1 - np.exp(-np.outer(u, lam))) / lam
            total += 0.5 * inner @ (wts * pg)
        return total

    u = np.clip(np.asarray(r, dtype=float), 0.0, upper)
    return mass(u) / mass(np.array([upper]))[0]


# ----------------------------------------------------------------------
# generator
# ----------------------------------------------------------------------
def test_superpopulation_marginals():
    p = ScenarioParams()
    pop = draw_superpopulation(p, np.random.default_rng(0), N)
    x1, x2 = pop["x"].T
    assert abs(x1.mean() - 0.5) < 3 * 0.5 / math.sqrt(N)
    assert abs(x2.std() - 0.3) < 3 * 0.3 / math.sqrt(2 * N)
    b0, b1, b2 = p.beta
    prob = 1 / (1 + np.exp(-(b0 + b1 * x1 + b2 * x2)))
    se = math.sqrt(np.mean(prob * (1 - prob)) / N)
    assert abs(pop["group"].mean() - prob.mean()) < 3 * se


def test_case1_pre_truncation_index_time_is_uniform():
    from scipy.stats import kstest

    pop = draw_superpopulation(ScenarioParams(), np.random.default_rng(1), N)
    assert kstest(pop["r"], "uniform", args=(0, 2)).pvalue > 0.001
    assert pop["r"].min() >= 0 and pop["r"].max() <= 2


def test_piecewise_exponential_survival_closed_form():
    rng = np.random.default_rng(2)
    lam, change, alpha = 0.4, 1.0, -1.0
    t = piecewise_exponential_time(rng.standard_exponential(N), lam, change, alpha)
    grid = np.array([0.25, 0.5, 1.0, 1.5, 3.0, 6.0])
    expected = np.where(grid <= change, np.exp(-lam * grid),
                        np.exp(-lam * change - lam * math.exp(alpha) * (grid - change)))
    empirical = np.array([(t > g).mean() for g in grid])
    np.testing.assert_allclose(empirical, expected, atol=0.01)


def test_residual_after_index_is_memoryless():
    p = ScenarioParams(alpha=-0.7)
    pop = draw_superpopulation(p, np.random.default_rng(3), 5 * N)
    keep = np.flatnonzero((pop["group"] == 1) & (pop["t"] > pop["r"]))[:N]
    assert keep.size == N
    scaled = (pop["t"][keep] - pop["r"][keep]) * pop["rate"][keep] * math.exp(p.alpha)
    rate_hat = 1.0 / scaled.mean()
    assert abs(rate_hat - 1.0) < 0.01


def test_accepted_index_times_follow_the_truncated_law():
    p = ScenarioParams(n1=20_000, n0=1)
    cohort = gen_population(p, np.random.default_rng(4))
    r = np.sort(cohort.index_time[cohort.group == 1])
    ecdf = np.arange(1, r.size + 1) / r.size
    dist = kolmogorov_distance(ecdf, r, lambda v: _single_arm_r_cdf(p, v))
    assert dist < 0.03
    # the pre-truncation law is visibly different
    assert kolmogorov_distance(ecdf, r, lambda v: np.clip(v / 2, 0, 1)) > 0.01


def test_cohort_layout():
    p = ScenarioParams(n1=30, n0=50)
    c = gen_population(p, np.random.default_rng(5))
    assert (c.n1, c.n0) == (30, 50)
    np.testing.assert_array_equal(c.ids, np.arange(80))
    np.testing.assert_array_equal(c.group, np.r_[np.ones(30), np.zeros(50)])
    assert np.all(np.isnan(c.index_time[30:])) and np.all(c.time[:30] > c.index_time[:30])
    assert c.covariate_names == ("x1", "x2")
    c.validate()


def test_censoring_structure():
    p = ScenarioParams()
    pop = draw_superpopulation(p, np.random.default_rng(6), N)
    sa = pop["group"] == 1
    w = pop["c"][sa] - pop["r"][sa]
    assert abs(w.mean() - 1 / p.censor_rate) < 3 * (1 / p.censor_rate) / math.sqrt(sa.sum())
    assert abs(pop["c"][~sa].mean() - 1 / p.censor_rate) < 0.05


def test_exchangeable_generator_gives_null_naive_estimate():
    from idisurv.idi import naive_analysis

    p = ScenarioParams(n1=2500, n0=2500, beta=(0.0, 0.0, 0.0), r_case="zero")
    res = naive_analysis(gen_population(p, np.random.default_rng(7)))
    assert abs(res.gamma) < 3 * res.se


def test_zero_sigma_reproduces_base_draws_exactly():
    base = gen_population(ScenarioParams(), np.random.default_rng(8))
    sens = gen_population(ScenarioParams(sigma_omega=0.0, omega_coef_g=3.0, omega_coef_t=-2.0),
                          np.random.default_rng(8))
    for attr in ("group", "time", "event", "index_time", "covariates"):
        np.testing.assert_array_equal(getattr(base, attr), getattr(sens, attr))
    other = gen_population(ScenarioParams(sigma_omega=1.0), np.random.default_rng(8))
    assert not np.array_equal(base.time, other.time)


def test_case2_index_time_depends_on_covariates():
    p = ScenarioParams(r_case="exponential")
    pop = draw_superpopulation(p, np.random.default_rng(9), N)
    x1 = pop["x"][:, 0] == 1
    # rate 0.5 * exp(-2 x1 - 2 x2): mean R is much longer when x1 = 1
    assert pop["r"][x1].mean() > 4 * pop["r"][~x1].mean()


def test_quota_exhaustion_raises():
    p = ScenarioParams(beta=(-12.0, 0.0, 0.0))
    with pytest.raises(IdiError, match="quotas"):
        gen_population(p, np.random.default_rng(0), max_batches=2)


def test_scenario_validation():
    with pytest.raises(ConfigError):
        ScenarioParams(n1=0)
    with pytest.raises(ConfigError):
        ScenarioParams(n1=2.5)
    with pytest.raises(ConfigError):
        ScenarioParams(r_case="weibull")
    with pytest.raises(ConfigError):
        ScenarioParams(lambda0=0)
    with pytest.raises(ConfigError):
        ScenarioParams(sigma_omega=-1)
    with pytest.raises(ConfigError):
        ScenarioParams(gamma=(1.0,))
    with pytest.raises(ConfigError, match="unknown"):
        ScenarioParams.from_dict({"n1": 10, "rho": 1})
    p = ScenarioParams.from_dict({"n1": 10.0, "alpha": -0.5})
    assert p.n1 == 10 and isinstance(p.n1, int)
    assert ScenarioParams.from_dict(p.to_dict()) == p


# ----------------------------------------------------------------------
# truth oracle
# ----------------------------------------------------------------------
def test_oracle_zero_effect():
    assert true_marginal_effect(ScenarioParams(alpha=0.0)) == 0.0


def test_oracle_is_stable_across_reruns():
    p = ScenarioParams(alpha=-0.5)
    a = true_marginal_effect(p, oracle_n=10**6, seed=0)
    b = true_marginal_effect(p, oracle_n=10**6, seed=1)
    assert abs(a - b) < 0.01
    # a marginal effect is attenuated towards 0 relative to the conditional one
    assert -0.5 < a < -0.4


# ----------------------------------------------------------------------
# Monte Carlo engine
# ----------------------------------------------------------------------
SMALL = ScenarioParams(n1=40, n0=120)


def test_study_is_reproducible_and_worker_independent():
    kw = dict(methods=("naive", "weighting"), n_reps=4, seed=3, bootstrap_B=5, true_effect=0.0)
    a = run_mc_study(SMALL, **kw)
    b = run_mc_study(SMALL, **kw)
    c = run_mc_study(SMALL, n_jobs=2, **kw)
    for m in ("naive", "weighting"):
        np.testing.assert_array_equal(a.results[m], b.results[m])
        np.testing.assert_array_equal(a.results[m], c.results[m])
    assert a.all_metrics() == b.all_metrics()
    other = run_mc_study(SMALL, **{**kw, "seed": 4})
    assert not np.array_equal(a.results["naive"], other.results["naive"])


def test_fixed_generator_gives_zero_sd(monkeypatch):
    fixed = gen_population(SMALL, np.random.default_rng(0))
    monkeypatch.setattr(sb, "gen_population", lambda params, rng: fixed)
    study = run_mc_study(SMALL, methods=("naive",), n_reps=5, true_effect=-0.2)
    met = study.metrics("naive")
    assert met.sd == 0.0 and met.coverage in (0.0, 1.0)
    assert met.abs_bias == pytest.approx(abs(met.mean + 0.2))


def test_failure_accounting(monkeypatch):
    real = sb.naive_analysis
    calls = {"n": 0}

    def flaky(cohort):
        calls["n"] += 1
        if calls["n"] in fail_on:
            raise EmptyGroupError("synthetic")
        return real(cohort)

    monkeypatch.setattr(sb, "naive_analysis", flaky)
    fail_on = {2}
    study = run_mc_study(SMALL, methods=("naive",), n_reps=20, true_effect=0.0)
    assert study.metrics("naive").n_failed == 1 and study.metrics("naive").n_reps == 19
    assert study.failures["naive"][0].startswith("replicate 1:")
    calls["n"] = 0
    fail_on = {1, 2}
    with pytest.raises(StudyFailure, match="2 of 20"):
        run_mc_study(SMALL, methods=("naive",), n_reps=20, true_effect=0.0)


def test_engine_argument_checks():
    with pytest.raises(ValueError):
        run_mc_study(SMALL, methods=("bogus",), n_reps=3, true_effect=0.0)
    with pytest.raises(ValueError):
        run_mc_study(SMALL, n_reps=1, true_effect=0.0)
    with pytest.raises(ValueError):
        power_curve(SMALL, [], n_reps=2)


def _hand_study(truth, rows):
    return McStudy(params=SMALL, true_effect=truth,
                   results={"naive": np.array(rows, dtype=float)}, failures={"naive": []})


def test_metrics_from_hand_results():
    study = _hand_study(-0.5, [[-0.4, 0.1, -0.6, -0.2], [-0.8, 0.2, -1.2, -0.45],
                               [np.nan] * 4, [-0.3, 0.1, -0.45, 0.1]])
    met = study.metrics("naive")
    assert met.mean == pytest.approx(-0.5)
    assert met.abs_bias == pytest.approx(0.0, abs=1e-15)
    assert met.sd == pytest.approx(np.std([-0.4, -0.8, -0.3], ddof=1))
    assert met.mean_se == pytest.approx(0.4 / 3)
    assert met.coverage == pytest.approx(2 / 3)
    assert met.power == pytest.approx(2 / 3)
    assert (met.n_reps, met.n_failed, met.label) == (3, 1, "Naive")


def test_csv_layouts():
    study = _hand_study(0.0, [[0.1, 0.1, -0.1, 0.3], [-0.1, 0.1, -0.3, 0.1]])
    lines = table_csv({0.0: study}).splitlines()
    assert lines[0] == "Effect,Method,True,Mean,Abs.Bias,SD,SE,Cov."
    assert lines[1] == ("0.000000,Naive,0.000000,0.000000,0.000000,"
                        f"{np.std([0.1, -0.1], ddof=1):.6f},0.100000,1.000000")
    curve = sb.PowerCurve(alphas=(0.0,), studies={0.0: study})
    assert power_csv(curve).splitlines() == ["alpha,method,power,mc_se",
                                             "0.000000,naive,0.000000,0.000000"]


def test_power_curve_shares_seed_across_grid():
    curve = power_curve(SMALL, [0.0, -1.0], n_reps=3, seed=5, methods=("naive",),
                        true_effect=0.0)
    assert curve.alphas == (0.0, -1.0)
    assert curve.power("naive").shape == (2,)
    # common random numbers: the same subjects are drawn, only post-index hazards change
    a = curve.studies[0.0].results["naive"][:, 0]
    b = curve.studies[-1.0].results["naive"][:, 0]
    assert np.all(b < a)
    assert len(curve.rows()) == 2
