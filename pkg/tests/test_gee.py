import numpy as np
import pytest

from smallarea import backend, gee, mle
from smallarea.gee import FitControl, SingularDesignError
from smallarea.influence import IDENTITY, PsiSpec, expected_square
from smallarea.model import Dataset

from conftest import synth_dataset

HUB = PsiSpec("huber", 1.345, 0.5)
IDENT = PsiSpec(IDENTITY, tau=0.5)


def noise_free_dataset(m=4, n_i=6):
    rng = np.random.default_rng(0)
    x = rng.uniform(0.5, 5.0, m * n_i)
    y = 10.0 + 5.0 * x
    return Dataset.from_arrays(np.repeat(np.arange(m), n_i), y, x,
                               N=np.full(m, 50))


def test_initial_values_reml_oracle():
    ds = synth_dataset(m=50, n_i=10, seed=21)  # 500 units
    params = gee.initial_values(ds)
    assert len(params) == ds.m
    slopes = {p.beta[0] for p in params}
    assert len(slopes) == 1  # replicated into every area
    assert params[0].beta[0] == pytest.approx(5.0, abs=0.2)
    assert all(p.tau == 0.5 for p in params)


def test_initial_values_noise_free():
    ds = noise_free_dataset()
    params = gee.initial_values(ds)
    assert params[0].beta0 == pytest.approx(10.0, abs=1e-5)
    assert params[0].beta[0] == pytest.approx(5.0, abs=1e-6)
    assert params[0].sigma2_eps == pytest.approx(0.0, abs=1e-8)


def test_solve_beta_identity_equals_gls():
    ds = synth_dataset(m=6, n_i=5, seed=3)
    state = _state(ds, s2g=2.0, s2e=4.0)
    a0, beta = gee.solve_beta(ds, 0, state, IDENT)
    # direct generalized-least-squares solve of the same pooled system
    X1 = np.column_stack([np.ones(ds.n), ds.X])
    A = np.zeros((2, 2))
    b = np.zeros(2)
    for l in range(ds.m):
        blk = slice(ds.starts[l], ds.starts[l + 1])
        nl = blk.stop - blk.start
        V = 2.0 * np.ones((nl, nl)) + 4.0 * np.eye(nl)
        Vi = np.linalg.inv(V)
        A += X1[blk].T @ Vi @ X1[blk]
        b += X1[blk].T @ Vi @ ds.y[blk]
    expected = np.linalg.solve(A, b)
    assert a0 == pytest.approx(expected[0], abs=1e-8)
    assert beta[0] == pytest.approx(expected[1], abs=1e-8)


def _state(ds, s2g=3.0, s2e=6.0, beta0=10.0, slope=5.0, taus=None):
    from smallarea.model import FitResult

    m = ds.m
    return FitResult(
        method="init", beta0=beta0, betas=np.full((m, ds.p), slope),
        sigma2_gamma=s2g, sigma2_eps=np.full(m, s2e),
        taus=np.full(m, 0.5) if taus is None else np.asarray(taus, float),
        iterations=0, converged=False, max_param_delta=float("nan"),
        alpha0=np.full(m, beta0),
    )


def test_solve_beta_root_satisfies_equation():
    rng = np.random.default_rng(8)
    x = rng.uniform(0, 4, 6)
    y = 10 + 5 * x + rng.normal(0, 1, 6)
    ds = Dataset.from_arrays([0, 0, 0, 1, 1, 1], y, x, N=np.array([9, 9]))
    state = _state(ds, s2g=1.0, s2e=2.0)
    a0, beta = gee.solve_beta(ds, 0, state, HUB, FitControl(tol=1e-12))
    # evaluate the pooled estimating equation at the returned coefficients
    from smallarea.influence import psi

    X1 = np.column_stack([np.ones(ds.n), ds.X])
    coef = np.array([a0, beta[0]])
    total = np.zeros(2)
    for l in range(ds.m):
        blk = slice(ds.starts[l], ds.starts[l + 1])
        nl = blk.stop - blk.start
        V = 1.0 * np.ones((nl, nl)) + 2.0 * np.eye(nl)
        U = np.diag(np.diag(V))
        r = np.diag(1 / np.sqrt(np.diag(V))) @ (ds.y[blk] - X1[blk] @ coef)
        total += X1[blk].T @ np.linalg.inv(V) @ np.sqrt(U) @ psi(HUB, r)
    assert np.max(np.abs(total)) / ds.n < 1e-6


def test_solve_beta_bounded_influence():
    ds = synth_dataset(m=5, n_i=8, seed=10)
    state = _state(ds)
    _, beta_clean = gee.solve_beta(ds, 0, state, IDENT)
    y = ds.y.copy()
    y[7] += 200.0  # gross outlier
    ds_out = ds.replace_y(y)
    _, beta_ident = gee.solve_beta(ds_out, 0, state, IDENT)
    _, beta_huber = gee.solve_beta(ds_out, 0, state, HUB)
    assert abs(beta_huber[0] - beta_clean[0]) < abs(beta_ident[0] - beta_clean[0])


def test_solve_sigma_eps_identity_recovers_mean_square():
    # identity influence, no area effect, unit multipliers: the root is the
    # area's mean squared residual
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 3, 40)
    y = 2.0 + 1.5 * x + rng.normal(0, 1.3, 40)
    ds = Dataset.from_arrays(np.repeat([0, 1], 20), y, x, N=np.array([100, 100]))
    coef, *_ = np.linalg.lstsq(np.column_stack([np.ones(40), x]), y, rcond=None)
    state = _state(ds, s2g=0.0, s2e=1.0, beta0=coef[0], slope=coef[1])
    state.sigma2_gamma = 1e-300  # exactly the no-area-effect limit
    resid = y - coef[0] - coef[1] * x
    for i in (0, 1):
        root, warned = gee.solve_sigma_eps(ds, i, state, IDENT)
        blk = slice(ds.starts[i], ds.starts[i + 1])
        assert not warned
        assert root == pytest.approx(float(np.mean(resid[blk] ** 2)), rel=1e-8)


def test_solve_sigma_eps_degenerate_clamps_to_floor():
    ds = noise_free_dataset()
    state = _state(ds, s2g=1e-300, s2e=1.0, beta0=10.0, slope=5.0)
    ctl = FitControl()
    root, warned = gee.solve_sigma_eps(ds, 0, state, IDENT, ctl)
    assert warned
    assert root == ctl.var_floor


def test_sigma_gamma_matches_dense_oracle():
    # two tiny areas: evaluate the area-variance equation with dense matrices
    rng = np.random.default_rng(12)
    x = rng.uniform(0, 3, 5)
    y = 10 + 5 * x + rng.normal(0, 1, 5)
    ds = Dataset.from_arrays([0, 0, 0, 1, 1], y, x, N=np.array([9, 9]))
    s2e = np.array([2.0, 3.0])
    betas = np.array([[5.1], [4.9]])
    beta0 = 9.8
    ker = backend.kernels()
    X1 = np.column_stack([np.ones(ds.n), ds.X])
    coefs = np.column_stack([np.full(2, beta0), betas])
    resid = ker.pooled_residuals(ds.y, X1, ds.starts, coefs)
    w_star = expected_square(HUB)

    from smallarea.influence import psi

    for g in (0.5, 1.0, 2.5):
        got = ker.sigma_gamma_equation(g, resid, ds.k, ds.starts, ds.h, s2e,
                                       HUB.code, HUB.c, w_star)
        # dense evaluation: G = g Z H Z' + R, A = diag(G)
        Z = np.zeros((5, 2))
        Z[:3, 0] = 1
        Z[3:, 1] = 1
        G = g * Z @ Z.T + np.diag(np.repeat(s2e, [3, 2]))
        A = np.diag(np.diag(G))
        rstar = resid
        zvec = np.sqrt(np.diag(A)) * psi(HUB, rstar / np.sqrt(np.diag(A)))
        Gi = np.linalg.inv(G)
        quad = zvec @ Gi @ Z @ Z.T @ Gi @ zvec
        trace = np.trace(Gi @ Z @ Z.T)
        assert got == pytest.approx(quad - w_star * trace, rel=1e-10, abs=1e-10)


def test_solve_sigma_gamma_no_between_area_signal():
    # residuals summing to zero within every area carry no area-level signal
    x = np.tile(np.linspace(1, 3, 4), 3)
    rng = np.random.default_rng(2)
    eps = rng.normal(0, 1, 4)
    eps = np.tile(eps - eps.mean(), 3)
    y = 10 + 5 * x + eps
    ds = Dataset.from_arrays(np.repeat([0, 1, 2], 4), y, x, N=np.full(3, 50))
    state = _state(ds, s2g=1.0, s2e=1.0, beta0=10.0, slope=5.0)
    ctl = FitControl()
    root, warned = gee.solve_sigma_gamma(ds, state, IDENT, ctl)
    assert warned
    assert root == ctl.var_floor


def test_fit_noise_free_converges_fast():
    ds = noise_free_dataset()
    fit = gee.fit(ds, HUB)
    assert fit.converged
    assert fit.iterations <= 3
    assert fit.beta0 == pytest.approx(10.0, abs=1e-5)
    np.testing.assert_allclose(fit.betas[:, 0], 5.0, atol=1e-5)
    ctl = FitControl()
    assert np.all(fit.sigma2_eps <= 10 * ctl.var_floor)
    assert fit.sigma2_gamma <= 10 * ctl.var_floor


def test_fit_pooling_identity_on_identical_areas():
    rng = np.random.default_rng(17)
    x = rng.uniform(0, 4, 8)
    y = 10 + 5 * x + rng.normal(0, 1, 8)
    m = 4
    ds = Dataset.from_arrays(np.repeat(np.arange(m), 8), np.tile(y, m),
                             np.tile(x, m), N=np.full(m, 20))
    fit = gee.fit(ds, IDENT)
    assert np.ptp(fit.alpha0) < 1e-8
    assert np.ptp(fit.betas[:, 0]) < 1e-8
    assert np.ptp(fit.sigma2_eps) < 1e-8


def test_fit_identity_reduces_to_homogeneous_ml():
    # identical data in every area force shared slopes and unit variances, so
    # the untilted identity equations collapse to the homogeneous-model
    # likelihood score system; the per-area likelihood fitter lands there too
    rng = np.random.default_rng(33)
    x = rng.uniform(0.5, 4.0, 9)
    y = 10 + 5 * x + rng.normal(0, 1.5, 9)
    m = 5
    ds = Dataset.from_arrays(np.repeat(np.arange(m), 9), np.tile(y, m),
                             np.tile(x, m), N=np.full(m, 30))
    fit = gee.fit(ds, IDENT, ctl=FitControl(tol=1e-10, max_iter=500))
    ml = mle.fit_bhf(ds, reml=False)
    assert fit.beta0 == pytest.approx(ml.beta0, abs=1e-4)
    assert fit.betas[0, 0] == pytest.approx(ml.beta[0], abs=1e-4)
    assert fit.sigma2_eps[0] == pytest.approx(ml.sigma2_eps, abs=1e-4)
    assert fit.sigma2_gamma == pytest.approx(ml.sigma2_gamma, abs=1e-4)
    hd = mle.fit_mle(ds, FitControl(tol=1e-12, max_iter=2000))
    assert hd.beta0 == pytest.approx(ml.beta0, abs=1e-3)
    np.testing.assert_allclose(hd.sigma2_eps, ml.sigma2_eps, atol=1e-3)


def test_fit_equation_residuals_at_convergence():
    ds = synth_dataset(m=8, n_i=6, seed=7)
    ctl = FitControl(tol=1e-8)
    taus = np.linspace(0.4, 0.6, ds.m)
    fit = gee.fit(ds, HUB, taus=taus, ctl=ctl)
    assert fit.converged
    # re-evaluate each estimating equation at the returned parameters
    ker = backend.kernels()
    X1 = np.column_stack([np.ones(ds.n), ds.X])
    state = fit
    for i in range(ds.m):
        a0, beta = gee.solve_beta(ds, i, state, PsiSpec("huber", 1.345, taus[i]),
                                  FitControl(tol=1e-12))
        assert abs(a0 - fit.alpha0[i]) < 10 * ctl.tol * max(1, abs(a0))
        root, _ = gee.solve_sigma_eps(ds, i, state,
                                      PsiSpec("huber", 1.345, taus[i]), ctl)
        assert abs(root - fit.sigma2_eps[i]) < 10 * ctl.tol * max(1, root)
    root, _ = gee.solve_sigma_gamma(ds, state, HUB, ctl)
    assert abs(root - fit.sigma2_gamma) < 10 * ctl.tol * max(1, root)


def test_fit_keeps_variances_floored_every_iteration():
    ds = synth_dataset(m=6, n_i=4, seed=50, s2e=0.01, s2g=0.001)
    ctl = FitControl()
    fit = gee.fit(ds, HUB, ctl=ctl)
    assert np.all(fit.sigma2_eps >= ctl.var_floor)
    assert fit.sigma2_gamma >= ctl.var_floor
    for pv in fit.params:
        assert pv.sigma2_eps >= 0 and pv.sigma2_gamma >= 0


def test_fit_permutation_equivariance():
    ds = synth_dataset(m=6, n_i=5, seed=19)
    taus = np.linspace(0.35, 0.65, 6)
    fit = gee.fit(ds, HUB, taus=taus)
    perm = [3, 1, 5, 0, 2, 4]
    # rebuild with areas permuted by reordering the unit stream
    blocks = [(ds.y[ds.starts[i]:ds.starts[i + 1]],
               ds.X[ds.starts[i]:ds.starts[i + 1]]) for i in range(6)]
    area_seq, ys, xs = [], [], []
    for j in perm:
        yb, xb = blocks[j]
        area_seq += [f"area{j}"] * len(yb)
        ys.append(yb)
        xs.append(xb)
    ds2 = Dataset.from_arrays(area_seq, np.concatenate(ys), np.vstack(xs),
                              N=ds.N[perm], Xbar=ds.Xbar[perm], h=ds.h[perm])
    fit2 = gee.fit(ds2, HUB, taus=taus[perm])
    np.testing.assert_allclose(fit2.betas[:, 0], fit.betas[perm, 0], atol=1e-9)
    np.testing.assert_allclose(fit2.sigma2_eps, fit.sigma2_eps[perm], atol=1e-9)
    assert fit2.sigma2_gamma == pytest.approx(fit.sigma2_gamma, abs=1e-9)


def test_fit_rejects_invalid_dataset():
    ds = synth_dataset(m=4, n_i=4, seed=1)
    bad = Dataset(ds.area_ids, ds.y, ds.X, ds.k * 0.0, ds.area_index, ds.starts,
                  ds.N, ds.n_i, ds.Xbar, ds.h)
    with pytest.raises(ValueError, match="invalid dataset"):
        gee.fit(bad, HUB)


def test_fit_control_validation():
    with pytest.raises(ValueError):
        FitControl(tol=-1)
    with pytest.raises(ValueError):
        FitControl(var_floor=0.5, bracket_max=0.1)
