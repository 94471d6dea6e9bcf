import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idisurv.errors import (ConvergenceWarning, EmptyRiskSetError, NonIdentifiableError,
                            SeparationError)
from idisurv.survival import (CoxFit, breslow_cumhaz, cox_partial_loglik, fit_cox, fit_km,
                              predict_survival)
from oracles import PartialLikelihood, breslow_loop, cox_mle_bruteforce, km_loop


# ----------------------------------------------------------------------
# Kaplan-Meier
# ----------------------------------------------------------------------
def test_km_all_censored_is_one():
    s = fit_km([1.0, 2.0, 3.0], [0, 0, 0])
    assert s(10.0) == 1.0 and len(s) == 0


def test_km_three_events():
    s = fit_km([1.0, 2.0, 3.0], [1, 1, 1])
    np.testing.assert_allclose([s(1), s(2), s(3)], [2 / 3, 1 / 3, 0.0], rtol=0, atol=1e-12)


def test_km_delayed_entry():
    s = fit_km([3.0, 4.0], [1, 1], entry=[0.0, 2.0])
    np.testing.assert_allclose([s(3), s(4)], [0.5, 0.0], rtol=0, atol=1e-12)


def test_km_entry_is_exclusive():
    # the second record enters at 1 and is not at risk at t = 1
    s = fit_km([1.0, 2.0], [1, 0], entry=[0.0, 1.0])
    assert s(1.0) == 0.0


def test_km_zero_weight_events_create_no_event_time():
    s = fit_km([1.0, 2.0, 3.0], [1, 1, 0], entry=[0.0, 1.5, 2.5], weight=[1.0, 0.0, 1.0])
    assert list(s.knots) == [1.0]


def test_empty_risk_set_error_carries_time():
    err = EmptyRiskSetError(2.0)
    assert err.time == 2.0 and "2" in str(err)


@pytest.mark.parametrize("bad", [dict(exit=[1.0], event=[1], entry=[1.0]),
                                 dict(exit=[1.0], event=[1], weight=[-1.0]),
                                 dict(exit=[], event=[])])
def test_km_rejects_invalid_input(bad):
    with pytest.raises(ValueError):
        fit_km(**bad)


def test_km_exhausted_risk_set_modes():
    # after the collapse at t = 1 a late entrant dies at t = 3
    exit, event, entry = [1.0, 3.0, 4.0], [1, 1, 0], [0.0, 2.0, 2.0]
    zero = fit_km(exit, event, entry=entry)
    skip = fit_km(exit, event, entry=entry, exhausted="skip")
    assert zero(1.0) == 0.0 and zero(5.0) == 0.0
    assert skip(1.0) == 1.0 and skip(3.0) == pytest.approx(0.5, abs=1e-15)


def test_km_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(30):
        n = int(rng.integers(2, 25))
        entry = np.round(rng.uniform(0, 1, n), 1) * (rng.random(n) < 0.5)
        exit = entry + np.round(rng.uniform(0.1, 3, n), 1)
        event = rng.random(n) < 0.7
        w = rng.uniform(0.2, 2, n)
        try:
            t, s = km_loop(exit, event, entry, w)
        except ZeroDivisionError:
            continue
        got = fit_km(exit, event, entry=entry, weight=w)
        np.testing.assert_allclose(got.knots, t)
        np.testing.assert_allclose(got.values, np.maximum(s, 0.0), rtol=0, atol=1e-12)


def test_km_no_entry_no_censoring_is_one_minus_ecdf():
    exit = np.array([0.5, 1.2, 1.2, 3.0, 4.5, 7.0])
    s = fit_km(exit, np.ones(6))
    ecdf = np.array([np.mean(exit <= t) for t in s.knots])
    np.testing.assert_allclose(s.values, 1 - ecdf, rtol=0, atol=1e-12)


times = st.lists(st.integers(1, 8), min_size=1, max_size=12)


@settings(max_examples=60, deadline=None)
@given(times, st.data())
def test_km_order_and_weight_splitting_invariance(exits, data):
    n = len(exits)
    events = data.draw(st.lists(st.booleans(), min_size=n, max_size=n))
    perm = data.draw(st.permutations(range(n)))
    exit = np.array(exits, dtype=float)
    event = np.array(events)
    base = fit_km(exit, event)
    shuffled = fit_km(exit[perm], event[perm])
    np.testing.assert_allclose(base.values, shuffled.values, atol=1e-12)
    doubled = fit_km(np.concatenate((exit, exit[:1])), np.concatenate((event, event[:1])),
                     weight=np.concatenate(([0.5], np.ones(n - 1), [0.5])))
    np.testing.assert_allclose(base.values, doubled.values, atol=1e-12)


# ----------------------------------------------------------------------
# Cox
# ----------------------------------------------------------------------
def test_cox_symmetric_data_gives_zero():
    fit = fit_cox([1, 1, 2, 2], [1, 1, 1, 1], [[0], [1], [0], [1]])
    assert fit.converged
    assert abs(fit.theta[0]) < 1e-12


def test_cox_three_subject_closed_form_root():
    fit = fit_cox([1, 2, 3], [1, 1, 1], [[0], [1], [0]])

    def dl(t):
        return -math.exp(t) / (2 + math.exp(t)) + 1 - math.exp(t) / (1 + math.exp(t))

    lo, hi = -5.0, 5.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if dl(mid) > 0 else (lo, mid)
    assert fit.theta[0] == pytest.approx(lo, abs=1e-9)


def test_cox_weight_scaling():
    rng = np.random.default_rng(1)
    n = 40
    x = rng.normal(size=(n, 2))
    exit = rng.exponential(size=n)
    event = rng.random(n) < 0.8
    w = rng.uniform(0.5, 2, n)
    a = fit_cox(exit, event, x, weight=w)
    b = fit_cox(exit, event, x, weight=2 * w)
    np.testing.assert_allclose(a.theta, b.theta, atol=1e-9)
    np.testing.assert_allclose(b.covariance, a.covariance / 2, rtol=1e-8)


def _random_dataset(rng, p):
    n = int(rng.integers(6, 21))
    x = rng.normal(size=(n, p))
    entry = rng.uniform(0, 0.5, n) * (rng.random(n) < 0.4)
    exit = entry + np.round(rng.exponential(1.0, n), 1) + 0.1
    event = rng.random(n) < 0.75
    event[0] = True
    w = np.where(rng.random(n) < 0.5, 1.0, rng.uniform(0.5, 2.0, n))
    return exit, event, x, entry, w


def test_cox_matches_bruteforce_maximiser_and_finite_differences():
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 50:
        p = 1 + checked % 2
        exit, event, x, entry, w = _random_dataset(rng, p)
        pl = PartialLikelihood(exit, event, x, entry, w)
        oracle = cox_mle_bruteforce(pl)
        if oracle is None:
            continue
        fit = fit_cox(exit, event, x, entry=entry, weight=w)
        assert np.max(np.abs(fit.theta - oracle)) < 1e-5
        ll, score, _ = cox_partial_loglik(oracle, exit, event, x, entry, w)
        assert ll == pytest.approx(pl.loglik(oracle), abs=1e-10)
        checked += 1


def test_score_and_information_match_finite_differences():
    rng = np.random.default_rng(7)
    for k in range(20):
        p = 1 + k % 3
        exit, event, x, entry, w = _random_dataset(rng, p)
        theta = rng.normal(scale=0.5, size=p)
        ll, score, info = cox_partial_loglik(theta, exit, event, x, entry, w)
        h = 1e-6
        fd = np.array([(cox_partial_loglik(theta + h * e, exit, event, x, entry, w)[0]
                        - cox_partial_loglik(theta - h * e, exit, event, x, entry, w)[0])
                       / (2 * h) for e in np.eye(p)])
        assert np.max(np.abs(fd - score)) <= 1e-6 * max(1.0, np.max(np.abs(score)))
        hess = np.array([(cox_partial_loglik(theta + h * e, exit, event, x, entry, w)[1]
                          - cox_partial_loglik(theta - h * e, exit, event, x, entry, w)[1])
                         / (2 * h) for e in np.eye(p)])
        np.testing.assert_allclose(-hess, info, rtol=1e-4, atol=1e-7)


def test_cox_covariance_is_inverse_information():
    rng = np.random.default_rng(11)
    exit, event, x, entry, w = _random_dataset(rng, 2)
    exit = np.concatenate([exit] * 4)
    event = np.concatenate([event] * 4)
    x = np.concatenate([x + rng.normal(scale=0.3, size=x.shape) for _ in range(4)])
    entry = np.concatenate([entry] * 4)
    w = np.concatenate([w] * 4)
    fit = fit_cox(exit, event, x, entry=entry, weight=w)
    _, score, info = cox_partial_loglik(fit.theta, exit, event, x, entry, w)
    assert np.max(np.abs(score)) < 1e-9 * max(1.0, np.sum(w[event]))
    np.testing.assert_allclose(fit.covariance, np.linalg.inv(info), rtol=1e-10)
    assert np.all(np.linalg.eigvalsh(fit.covariance) > 0)
    lo, hi = fit.confint()
    np.testing.assert_allclose(hi - lo, 2 * 1.959963984540054 * fit.se)


def test_cox_separation_error():
    with pytest.raises(SeparationError):
        fit_cox([1, 2, 3, 4], [1, 1, 1, 1], [[3], [2], [1], [0]])


def test_cox_constant_column_is_not_identifiable():
    with pytest.raises(NonIdentifiableError):
        fit_cox([1, 2, 3], [1, 1, 1], [[1.0, 0.2], [1.0, 0.5], [1.0, -0.1]])


def test_cox_nonconvergence_is_flagged():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(30, 1))
    exit = rng.exponential(size=30)
    with pytest.warns(ConvergenceWarning):
        fit = fit_cox(exit, np.ones(30), x, max_iter=1, tol=1e-30)
    assert not fit.converged


def test_cox_zero_weight_rows_are_ignored():
    rng = np.random.default_rng(8)
    n = 30
    x = rng.normal(size=(n, 1))
    exit = rng.exponential(size=n)
    event = rng.random(n) < 0.8
    base = fit_cox(exit, event, x)
    padded = fit_cox(np.concatenate((exit, [0.5, 9.0])), np.concatenate((event, [1, 1])),
                     np.concatenate((x, [[5.0], [-5.0]])), weight=np.r_[np.ones(n), 0.0, 0.0])
    np.testing.assert_allclose(base.theta, padded.theta, atol=1e-10)


# ----------------------------------------------------------------------
# Breslow and prediction
# ----------------------------------------------------------------------
def test_breslow_null_model_is_nelson_aalen():
    exit = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    fit = fit_cox(exit, np.ones(5), np.zeros((5, 0)))
    h = breslow_cumhaz(fit, exit, np.ones(5), np.zeros((5, 0)))
    expected = np.cumsum(1 / np.array([5.0, 4.0, 3.0, 2.0, 1.0]))
    np.testing.assert_allclose(h.values, expected, rtol=0, atol=1e-12)


def test_breslow_single_subject():
    fit = CoxFit(theta=np.array([0.7]), covariance=np.eye(1), loglik=0.0, n_iter=0,
                 converged=True, score=np.zeros(1), n_events=1.0)
    h = breslow_cumhaz(fit, [2.0], [1], [[0.3]])
    assert h(2.0) == pytest.approx(math.exp(-0.7 * 0.3), rel=1e-12)
    assert h(1.9) == 0.0


def test_breslow_matches_loop_oracle():
    rng = np.random.default_rng(9)
    n = 25
    x = rng.normal(size=(n, 2))
    entry = rng.uniform(0, 0.3, n)
    exit = entry + np.round(rng.exponential(size=n), 1) + 0.1
    event = rng.random(n) < 0.8
    fit = fit_cox(exit, event, x, entry=entry)
    h = breslow_cumhaz(fit, exit, event, x, entry=entry)
    t, cum = breslow_loop(fit.theta, exit, event, x, entry)
    np.testing.assert_allclose(h.knots, t)
    np.testing.assert_allclose(h.values, cum, rtol=1e-12)


def test_breslow_three_subject_example():
    exit, event, x = [1.0, 2.0, 3.0], [1, 1, 1], [[0.0], [1.0], [0.0]]
    fit = fit_cox(exit, event, x)
    e = math.exp(fit.theta[0])
    h = breslow_cumhaz(fit, exit, event, x)
    np.testing.assert_allclose(h.values, np.cumsum([1 / (2 + e), 1 / (1 + e), 1.0]), rtol=1e-12)


def test_predict_survival():
    fit = fit_cox([1.0, 2.0, 3.0, 4.0], [1, 1, 1, 0], [[0.0], [1.0], [0.5], [0.2]])
    h = breslow_cumhaz(fit, [1.0, 2.0, 3.0, 4.0], [1, 1, 1, 0], [[0.0], [1.0], [0.5], [0.2]])
    assert predict_survival(fit, h, [0.7], 0.0) == 1.0
    assert predict_survival(fit, h, [0.0], 2.5) == pytest.approx(math.exp(-h(2.5)))
    x = np.array([0.4])
    oracle = math.exp(-sum(j for k, j in zip(h.knots, h.jumps) if k <= 2.0)
                      * math.exp(fit.theta[0] * 0.4))
    assert predict_survival(fit, h, x, 2.0) == pytest.approx(oracle, rel=1e-12)
    grid = np.linspace(0, 5, 21)
    s = predict_survival(fit, h, x, grid)
    assert np.all(np.diff(s) <= 0)
    mat = predict_survival(fit, h, np.array([[0.0], [1.0]]), grid)
    assert mat.shape == (2, grid.size)
    with pytest.raises(ValueError):
        predict_survival(fit, h, [0.0, 1.0], 1.0)
    with pytest.raises(ValueError):
        predict_survival(fit, h, [0.0], -1.0)


def test_predict_survival_monotone_in_covariate_for_positive_coefficient():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(60, 1))
    exit = rng.exponential(size=60) * np.exp(-0.8 * x[:, 0])
    fit = fit_cox(exit, np.ones(60), x)
    assert fit.theta[0] > 0
    h = breslow_cumhaz(fit, exit, np.ones(60), x)
    s = predict_survival(fit, h, np.linspace(-2, 2, 9)[:, None], 1.0)
    assert np.all(np.diff(s) <= 0)


def test_no_warnings_on_regular_fit():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(50, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit_cox(rng.exponential(size=50), np.ones(50), x)
