import numpy as np
import pytest

from smallarea import gee, predict, uncertainty
from smallarea.gee import FitControl
from smallarea.influence import PsiSpec
from smallarea.model import FitResult
from smallarea.uncertainty import MeasureSpec, mcjack_combine

from conftest import synth_dataset

HUB = PsiSpec("huber", 1.345, 0.5)


def _fitted(ds, **kw):
    taus = kw.pop("taus", np.full(ds.m, 0.5))
    return gee.fit(ds, HUB, taus=taus, ctl=FitControl(**kw))


def test_leading_term_examples():
    vals = uncertainty.leading_variance_term(3.0, np.array([6.0]), np.array([4]))
    assert np.sqrt(vals[0]) == pytest.approx(1.0)
    assert uncertainty.leading_variance_term(0.0, np.array([6.0]), np.array([4]))[0] == 0.0
    assert uncertainty.leading_variance_term(3.0, np.array([0.0]), np.array([4]))[0] == 0.0


def test_naive_rmse_uses_fit_parameters(small_ds):
    fit = _fitted(small_ds)
    est = uncertainty.naive_rmse(small_ds, fit)
    manual = np.sqrt(uncertainty.leading_variance_term(
        fit.sigma2_gamma, fit.sigma2_eps, small_ds.n_i))
    np.testing.assert_allclose(est.values, manual)
    lo, hi = est.interval
    point = predict.ebp(small_ds, fit)
    np.testing.assert_allclose(hi - point, 2 * est.values, atol=1e-12)
    np.testing.assert_allclose(point - lo, 2 * est.values, atol=1e-12)


def test_measure_spec_transforms():
    spec_mse = MeasureSpec.mse()
    spec_rmse = MeasureSpec.rmse()
    d = np.array([4.0, 9.0])
    p = np.array([2.0, 3.0])
    np.testing.assert_allclose(spec_mse.apply(d, p), d)
    np.testing.assert_allclose(spec_rmse.apply(d, p), [2.0, 3.0])
    np.testing.assert_allclose(MeasureSpec.rrmse().apply(d, p), [1.0, 1.0])
    np.testing.assert_allclose(MeasureSpec.log_mse().apply(d, p), np.log(d))
    with pytest.raises(ValueError):
        MeasureSpec("cubes", ())
    with pytest.raises(ValueError):
        MeasureSpec("squared_error", ("exp",))


def test_bootstrap_sqrt_consistency(small_ds):
    fit = _fitted(small_ds)
    mse = uncertainty.bootstrap_measure(small_ds, fit, MeasureSpec.mse(),
                                        R=20, seed=9)
    rmse = uncertainty.bootstrap_measure(small_ds, fit, MeasureSpec.rmse(),
                                         R=20, seed=9)
    np.testing.assert_allclose(rmse.values**2, mse.values, rtol=1e-12)


def test_bootstrap_deterministic(small_ds):
    fit = _fitted(small_ds)
    a = uncertainty.bootstrap_measure(small_ds, fit, R=15, seed=123)
    b = uncertainty.bootstrap_measure(small_ds, fit, R=15, seed=123)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.interval[0], b.interval[0])
    c = uncertainty.bootstrap_measure(small_ds, fit, R=15, seed=124)
    assert not np.array_equal(a.values, c.values)


def test_bootstrap_interval_ordering(small_ds):
    fit = _fitted(small_ds)
    est = uncertainty.bootstrap_measure(small_ds, fit, R=40, seed=5)
    lo, hi = est.interval
    assert np.all(lo <= hi)
    assert np.all(est.values >= 0)


def test_bootstrap_requires_replicates(small_ds):
    fit = _fitted(small_ds)
    with pytest.raises(ValueError):
        uncertainty.bootstrap_measure(small_ds, fit, R=1, seed=0)


def test_bootstrap_fail_fraction_guard(small_ds):
    fit = _fitted(small_ds)
    calls = {"n": 0}

    def flaky_refit(ds, state):
        calls["n"] += 1
        if calls["n"] % 2 == 0:
            raise gee.SingularDesignError("boom")
        return fit

    with pytest.raises(RuntimeError, match="replicate fits failed"):
        uncertainty.bootstrap_measure(small_ds, fit, R=10, seed=0,
                                      refit=flaky_refit)


def test_bootstrap_skips_rare_failures(small_ds):
    fit = _fitted(small_ds)
    calls = {"n": 0}

    def mostly_ok(ds, state):
        calls["n"] += 1
        if calls["n"] == 3:
            raise gee.SingularDesignError("one bad replicate")
        return gee.fit(ds, HUB, taus=state.taus, init=state)

    est = uncertainty.bootstrap_measure(small_ds, fit, R=10, seed=0,
                                        refit=mostly_ok)
    assert est.n_failed == 1
    assert np.all(np.isfinite(est.values))


def test_mcjack_combine_constant_is_identity():
    a = np.array([1.0, 2.0, 3.0])
    a_loo = np.tile(a, (3, 1))
    np.testing.assert_array_equal(mcjack_combine(a, a_loo), a)


def test_mcjack_combine_formula_oracle():
    rng = np.random.default_rng(0)
    m = 4
    a = rng.uniform(1, 2, m)
    a_loo = rng.uniform(1, 2, (m, m))
    got = mcjack_combine(a, a_loo)
    # independent re-implementation, one area at a time
    for i in range(m):
        corr = sum(a_loo[l, i] - a[i] for l in range(m)) * (m - 1) / m
        assert got[i] == pytest.approx(a[i] - corr, abs=1e-12)


def test_mcjack_micro_run_matches_inline_formula():
    ds = synth_dataset(m=3, n_i=6, seed=77)
    fit = _fitted(ds)
    est = uncertainty.mcjack_measure(ds, fit, R=10, seed=3)
    a_full = est.extras["bootstrap_values"]
    a_loo = est.extras["loo_values"]
    manual = a_full - (2 / 3) * np.sum(a_loo - a_full[None, :], axis=0)
    np.testing.assert_allclose(est.values, manual, atol=1e-12)
    lo, hi = est.interval
    point = predict.ebp(ds, fit)
    np.testing.assert_allclose(hi - point, 2 * np.maximum(est.values, 0), atol=1e-12)


def test_mcjack_needs_three_areas():
    ds = synth_dataset(m=2, n_i=5, seed=1)
    fit = _fitted(ds)
    with pytest.raises(ValueError, match="3 areas"):
        uncertainty.mcjack_measure(ds, fit, R=5, seed=0)


def test_bootstrap_monte_carlo_error_shrinks():
    ds = synth_dataset(m=6, n_i=6, seed=55)
    fit = _fitted(ds)
    lo_r, hi_r = 25, 100
    vals = {}
    for R in (lo_r, hi_r):
        draws = [uncertainty.bootstrap_measure(ds, fit, R=R, seed=s).values[0]
                 for s in range(6)]
        vals[R] = np.std(draws)
    ratio = vals[lo_r] / vals[hi_r]
    # quadrupling R should roughly halve the Monte Carlo error
    assert 1.1 < ratio < 4.0
