import numpy as np
import pytest

from smallarea.model import Dataset
from smallarea.mquantile import (TauGrid, elb_tau, fit_grid, fit_mquantile,
                                 unit_coefficients)
from smallarea.influence import PsiSpec, psi

from conftest import synth_dataset


def test_grid_validation():
    with pytest.raises(ValueError):
        TauGrid((0.5, 0.4))
    with pytest.raises(ValueError):
        TauGrid((0.001, 0.5))
    with pytest.raises(ValueError):
        TauGrid(())
    g = TauGrid.from_spec(0.3, 0.7, 0.1)
    np.testing.assert_allclose(g.array, [0.3, 0.4, 0.5, 0.6, 0.7])


def test_huge_c_recovers_least_squares():
    ds = synth_dataset(m=10, n_i=20, seed=5)
    X1 = np.column_stack([np.ones(ds.n), ds.X])
    ols, *_ = np.linalg.lstsq(X1, ds.y, rcond=None)
    coef = fit_mquantile(ds, 0.5, c=1e6)
    np.testing.assert_allclose(coef, ols, atol=1e-6)


def test_interpolating_fit_is_exact():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 5, 30)
    y = 10.0 + 5.0 * x
    ds = Dataset.from_arrays(np.repeat([0, 1, 2], 10), y, x)
    for tau in (0.1, 0.5, 0.9):
        coef = fit_mquantile(ds, tau, c=1.345)
        np.testing.assert_allclose(coef, [10.0, 5.0], atol=1e-10)


def test_tilt_orders_fitted_lines():
    rng = np.random.default_rng(7)
    x = rng.lognormal(1.0, 0.5, 200)
    y = 10 + 5 * x + rng.standard_gamma(2.0, 200) * 2.0  # skewed noise
    ds = Dataset.from_arrays(np.repeat(np.arange(10), 20), y, x)
    lo = fit_mquantile(ds, 0.5, 1.345)
    hi = fit_mquantile(ds, 0.75, 1.345)
    grid_x = np.linspace(x.min(), x.max(), 50)
    diff = (hi[0] + hi[1] * grid_x) - (lo[0] + lo[1] * grid_x)
    assert np.all(diff >= -1e-8)


def test_estimating_equation_at_fixed_point():
    ds = synth_dataset(m=6, n_i=15, seed=11)
    X1 = np.column_stack([np.ones(ds.n), ds.X])
    for tau in (0.3, 0.5, 0.7):
        coef = fit_mquantile(ds, tau, 1.345)
        resid = ds.y - X1 @ coef
        scale = np.median(np.abs(resid)) / 0.6745
        score = X1.T @ psi(PsiSpec("huber", 1.345, tau), resid / scale)
        assert np.max(np.abs(score)) / ds.n < 1e-6


def test_unit_coefficients_exact_hit():
    grid = TauGrid((0.2, 0.3, 0.5, 0.7, 0.8))
    ds = synth_dataset(m=4, n_i=10, seed=2)
    coefs = fit_grid(ds, grid, 1.345)
    # plant a unit exactly on the tau=0.3 line
    X1 = np.column_stack([np.ones(ds.n), ds.X])
    y = ds.y.copy()
    y[3] = coefs[1] @ X1[3]
    ds2 = ds.replace_y(y)
    taus = unit_coefficients(ds2, grid, 1.345, grid_coefs=coefs)
    assert taus[3] == 0.3


def test_unit_coefficients_tie_breaks_toward_center():
    # all grid lines coincide on interpolating data: pick the level nearest 0.5
    x = np.linspace(1, 4, 12)
    y = 10 + 5 * x
    ds = Dataset.from_arrays(np.repeat([0, 1, 2], 4), y, x)
    grid = TauGrid((0.2, 0.4, 0.6, 0.8))
    taus = unit_coefficients(ds, grid, 1.345)
    assert np.all(taus == 0.4)  # 0.4 and 0.6 tie on |tau - 0.5|; smaller wins


def test_unit_coefficients_brute_force():
    rng = np.random.default_rng(4)
    ds = synth_dataset(m=3, n_i=5, seed=4)
    grid = TauGrid((0.2, 0.35, 0.5, 0.65, 0.8))
    coefs = fit_grid(ds, grid, 1.345)
    X1 = np.column_stack([np.ones(ds.n), ds.X])
    taus = unit_coefficients(ds, grid, 1.345, grid_coefs=coefs)
    errs = np.abs(ds.y[:, None] - X1 @ coefs.T)
    for j in range(ds.n):
        best = np.flatnonzero(errs[j] == errs[j].min())
        # preference: |tau-0.5| then smaller tau
        order = sorted(best, key=lambda g: (abs(grid.array[g] - 0.5), grid.array[g]))
        assert taus[j] == grid.array[order[0]]


def test_elb_no_shrinkage_when_units_agree():
    ds = synth_dataset(m=3, n_i=4, seed=1)
    unit_tau = np.repeat([0.3, 0.5, 0.7], 4)  # zero within-area variance
    est = elb_tau(ds, unit_tau, TauGrid((0.3, 0.5, 0.7)))
    np.testing.assert_allclose(est.elb_tau, [0.3, 0.5, 0.7])
    assert est.nu2_hat == 0.0


def test_elb_full_shrinkage_when_between_vanishes():
    ds = synth_dataset(m=3, n_i=4, seed=1)
    rng = np.random.default_rng(0)
    base = np.array([0.3, 0.5, 0.7, 0.5])
    unit_tau = np.concatenate([base, base, base])  # identical area profiles
    est = elb_tau(ds, unit_tau, TauGrid((0.3, 0.5, 0.7)))
    assert est.eta2_hat == 0.0
    np.testing.assert_allclose(est.elb_tau, est.mu_hat)


def test_elb_hand_computation():
    ds = synth_dataset(m=3, n_i=4, seed=1)
    unit_tau = np.array([0.30, 0.40, 0.35, 0.45,
                         0.55, 0.60, 0.50, 0.55,
                         0.70, 0.65, 0.75, 0.70])
    grid = TauGrid((0.2, 0.8))
    est = elb_tau(ds, unit_tau, grid)
    area_mean = unit_tau.reshape(3, 4).mean(axis=1)
    mu = area_mean.mean()
    nu2 = np.sum((unit_tau.reshape(3, 4) - area_mean[:, None]) ** 2) / (12 - 3)
    between = np.sum((area_mean - mu) ** 2) / 2
    eta2 = max(0.0, between - nu2 * np.mean(1 / np.full(3, 4.0)))
    B = (nu2 / 4) / (nu2 / 4 + eta2)
    expected = np.clip((1 - B) * area_mean + B * mu, 0.2, 0.8)
    np.testing.assert_allclose(est.elb_tau, expected, atol=1e-12)
    assert est.mu_hat == pytest.approx(mu)
    assert est.nu2_hat == pytest.approx(nu2)
    assert est.eta2_hat == pytest.approx(eta2)


def test_elb_between_mean_and_area_value():
    ds = synth_dataset(m=4, n_i=5, seed=9)
    rng = np.random.default_rng(3)
    unit_tau = np.clip(rng.normal(0.5, 0.1, ds.n), 0.05, 0.95)
    est = elb_tau(ds, unit_tau, TauGrid((0.02, 0.98)))
    lo = np.minimum(est.area_mean_tau, est.mu_hat)
    hi = np.maximum(est.area_mean_tau, est.mu_hat)
    assert np.all(est.elb_tau >= lo - 1e-12)
    assert np.all(est.elb_tau <= hi + 1e-12)


def test_shrinkage_decreases_with_sample_size():
    # hold moment estimates fixed, vary n_i
    nu2, eta2 = 0.01, 0.02
    B = lambda n: (nu2 / n) / (nu2 / n + eta2)
    assert B(2) > B(5) > B(20)


def test_grid_refinement_stability():
    ds = synth_dataset(m=6, n_i=8, seed=13)
    coarse = TauGrid.from_spec(0.3, 0.7, 0.04)
    fine = TauGrid.from_spec(0.3, 0.7, 0.02)
    from smallarea.mquantile import estimate_taus

    est_c = estimate_taus(ds, coarse, 1.345)
    est_f = estimate_taus(ds, fine, 1.345)
    assert np.max(np.abs(est_c.elb_tau - est_f.elb_tau)) <= 0.04 + 1e-12
