"""Likelihood-based fitters: per-area MLE and the homogeneous REML/ML fit.

The per-area MLE runs cyclic coordinate ascent with closed-form updates for
the intercept and slopes and exact one-dimensional maximization for each
variance, so the log-likelihood never decreases. The homogeneous fitter
profiles the likelihood down to a single variance-ratio search and backs
out GLS coefficients, serving both as the classical comparator and as the
initializer for the estimating-equation fitter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gee import FitControl, _as_taus
from .model import MLE, Dataset, FitResult, validate

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _require_unit_multipliers(dataset: Dataset, what: str):
    if not (np.allclose(dataset.k, 1.0) and np.allclose(dataset.h, 1.0)):
        raise ValueError(f"{what} requires unit variance multipliers (k = h = 1)")


@dataclass
class _SuffStats:
    n_i: np.ndarray      # (m,)
    Sx: np.ndarray       # (m, p)
    Sy: np.ndarray       # (m,)
    Sxx: np.ndarray      # (m, p, p)
    Sxy: np.ndarray      # (m, p)
    Syy: np.ndarray      # (m,)

    @property
    def xbar(self):
        return self.Sx / self.n_i[:, None]

    @property
    def ybar(self):
        return self.Sy / self.n_i


def _suff_stats(dataset: Dataset) -> _SuffStats:
    m, p = dataset.m, dataset.p
    Sx = np.zeros((m, p))
    Sy = np.zeros(m)
    Sxx = np.zeros((m, p, p))
    Sxy = np.zeros((m, p))
    Syy = np.zeros(m)
    for i in range(m):
        blk = slice(dataset.starts[i], dataset.starts[i + 1])
        Xb, yb = dataset.X[blk], dataset.y[blk]
        Sx[i] = Xb.sum(axis=0)
        Sy[i] = yb.sum()
        Sxx[i] = Xb.T @ Xb
        Sxy[i] = Xb.T @ yb
        Syy[i] = float(yb @ yb)
    return _SuffStats(dataset.n_i.astype(float), Sx, Sy, Sxx, Sxy, Syy)


def _loglik_terms(st: _SuffStats, beta0, betas, s2g, s2e):
    """Vector of per-area log-likelihood contributions (constant dropped)."""
    n = st.n_i
    ssr = (st.Syy - 2.0 * beta0 * st.Sy
           - 2.0 * np.einsum("ij,ij->i", betas, st.Sxy)
           + 2.0 * beta0 * np.einsum("ij,ij->i", betas, st.Sx)
           + n * beta0**2
           + np.einsum("ij,ijk,ik->i", betas, st.Sxx, betas))
    rbar = st.ybar - beta0 - np.einsum("ij,ij->i", betas, st.xbar)
    denom = s2e + n * s2g
    return -0.5 * (
        n * np.log(s2e) + np.log(denom / s2e)
        + (ssr - (s2g / denom) * (n * rbar) ** 2) / s2e
    )


def loglik(dataset: Dataset, params) -> float:
    """Log-likelihood (constant dropped) of the area-heterogeneous model.

    ``params`` is a FitResult or list of per-area ParamVector sharing one
    intercept and one area-effect variance. Requires k = h = 1 and strictly
    positive variances.
    """
    _require_unit_multipliers(dataset, "loglik")
    if isinstance(params, FitResult):
        beta0 = params.beta0
        betas = np.asarray(params.betas, dtype=float)
        s2g = float(params.sigma2_gamma)
        s2e = np.asarray(params.sigma2_eps, dtype=float)
    else:
        beta0 = params[0].beta0
        betas = np.array([pv.beta for pv in params], dtype=float)
        s2g = float(params[0].sigma2_gamma)
        s2e = np.array([pv.sigma2_eps for pv in params], dtype=float)
    if np.any(s2e <= 0) or s2g < 0:
        raise ValueError("loglik requires positive unit variances and nonnegative "
                         "area variance")
    st = _suff_stats(dataset)
    return float(np.sum(_loglik_terms(st, beta0, betas, s2g, s2e)))


def _golden_max_vec(f, lo, hi, iters=45):
    """Vectorized golden-section maximization over per-area brackets."""
    a = lo.copy()
    b = hi.copy()
    c1 = b - _GOLDEN * (b - a)
    c2 = a + _GOLDEN * (b - a)
    f1, f2 = f(c1), f(c2)
    for _ in range(iters):
        go_left = f1 >= f2
        b = np.where(go_left, c2, b)
        a = np.where(go_left, a, c1)
        c1 = b - _GOLDEN * (b - a)
        c2 = a + _GOLDEN * (b - a)
        f1, f2 = f(c1), f(c2)
    return 0.5 * (a + b)


def _golden_max(f, lo, hi, iters=45):
    arr = _golden_max_vec(lambda v: np.array([f(v[0])]),
                          np.array([lo]), np.array([hi]), iters)
    return float(arr[0])


def _grid_then_golden_vec(f, lo, hi, grid_size=21):
    """Coarse log-grid scan then golden polish, elementwise over areas."""
    grid = np.exp(np.linspace(np.log(lo), np.log(hi), grid_size))  # (g,)
    vals = np.stack([f(g) for g in grid])                          # (g, m)
    best = np.argmax(vals, axis=0)
    lo_b = grid[np.maximum(best - 1, 0)]
    hi_b = grid[np.minimum(best + 1, grid_size - 1)]
    return _golden_max_vec(f, lo_b, hi_b)


def fit_mle(dataset: Dataset, ctl: FitControl = FitControl(tol=1e-8, max_iter=500)) -> FitResult:
    """Maximum likelihood for the area-heterogeneous model by coordinate ascent.

    Updates cycle intercept -> slopes -> unit variances -> area variance; the
    variance steps maximize the exact conditional log-likelihood on a
    bracket, so the objective is non-decreasing. Stops when the
    log-likelihood gain falls below ``ctl.tol``.
    """
    problems = validate(dataset)
    if problems:
        raise ValueError("invalid dataset: " + "; ".join(problems))
    _require_unit_multipliers(dataset, "fit_mle")
    if np.any(dataset.n_i < 2):
        raise ValueError("fit_mle needs at least two units per area")

    st = _suff_stats(dataset)
    m, p = dataset.m, dataset.p
    n = st.n_i
    bhf = fit_bhf_reml(dataset)
    floor = ctl.var_floor
    hi = 1e6 * max(float(np.var(dataset.y)), 1e-6)

    beta0 = bhf.beta0
    betas = np.tile(np.asarray(bhf.beta, dtype=float), (m, 1))
    betas_init = betas.copy()
    s2e = np.full(m, max(bhf.sigma2_eps, floor))
    s2g = max(bhf.sigma2_gamma, 0.0)
    xbar, ybar = st.xbar, st.ybar

    flagged: list[int] = []
    ll = float(np.sum(_loglik_terms(st, beta0, betas, s2g, s2e)))
    trace = [ll]
    converged = False
    iterations = 0
    for t in range(1, ctl.max_iter + 1):
        iterations = t
        B = s2e / (s2e + n * s2g)

        # intercept: precision-weighted mean of area-level residuals
        wgt = n * B / s2e
        beta0 = float(np.sum(wgt * (ybar - np.einsum("ij,ij->i", betas, xbar)))
                      / np.sum(wgt))

        # per-area slopes
        shrink = (n * (1.0 - B))[:, None, None]
        M = st.Sxx - shrink * np.einsum("ij,ik->ijk", xbar, xbar)
        rhs = (st.Sxy - beta0 * st.Sx
               - (n * (1.0 - B) * (ybar - beta0))[:, None] * xbar)
        dets = np.linalg.det(M)
        ok = np.abs(dets) > 1e-12 * np.maximum(1.0, np.abs(M).max(axis=(1, 2)) ** p)
        if np.all(ok):
            betas = np.linalg.solve(M, rhs[:, :, None])[:, :, 0]
        else:
            for i in range(m):
                if ok[i]:
                    betas[i] = np.linalg.solve(M[i], rhs[i])
                else:
                    if i not in flagged:
                        flagged.append(i)
                    betas[i] = betas_init[i]

        # unit variances: exact conditional maximizer per area
        ssr = (st.Syy - 2.0 * beta0 * st.Sy
               - 2.0 * np.einsum("ij,ij->i", betas, st.Sxy)
               + 2.0 * beta0 * np.einsum("ij,ij->i", betas, st.Sx)
               + n * beta0**2
               + np.einsum("ij,ijk,ik->i", betas, st.Sxx, betas))
        rbar = ybar - beta0 - np.einsum("ij,ij->i", betas, xbar)
        nr2 = (n * rbar) ** 2

        def cond_ll_eps(s):
            denom = s + n * s2g
            return -0.5 * ((n - 1.0) * np.log(s) + np.log(denom)
                           + ssr / s - s2g * nr2 / (s * denom))

        s2e = _grid_then_golden_vec(cond_ll_eps, floor, hi)

        # area variance: exact conditional maximizer (bracket includes ~0)
        def cond_ll_gam(g):
            denom = s2e + n * g
            return float(np.sum(-0.5 * (np.log(denom) - g * nr2 / (s2e * denom))))

        s2g = _grid_then_golden(cond_ll_gam, 1e-12, hi)
        if cond_ll_gam(0.0) >= cond_ll_gam(s2g):
            s2g = 0.0

        ll_new = float(np.sum(_loglik_terms(st, beta0, betas, s2g, s2e)))
        trace.append(ll_new)
        gain = ll_new - ll
        ll = ll_new
        if abs(gain) < ctl.tol:
            converged = True
            break

    warnings = []
    if flagged:
        ids = [dataset.area_ids[i] for i in flagged]
        warnings.append(f"singular slope system, kept initial values: {ids}")
    return FitResult(
        method=MLE,
        beta0=beta0,
        betas=betas,
        sigma2_gamma=float(s2g),
        sigma2_eps=s2e,
        taus=_as_taus(dataset, None),
        iterations=iterations,
        converged=converged,
        max_param_delta=abs(trace[-1] - trace[-2]) if len(trace) > 1 else float("nan"),
        alpha0=np.full(m, beta0),
        trace=trace,
        warnings=warnings,
    )


def _grid_then_golden(f, lo, hi, grid_size=21):
    grid = np.exp(np.linspace(np.log(lo), np.log(hi), grid_size))
    vals = np.array([f(g) for g in grid])
    best = int(np.argmax(vals))
    lo_b = grid[max(best - 1, 0)]
    hi_b = grid[min(best + 1, grid_size - 1)]
    return _golden_max(f, lo_b, hi_b)


@dataclass
class BhfFit:
    """Homogeneous nested-error fit: shared slopes, two variance components."""

    beta0: float
    beta: np.ndarray
    sigma2_gamma: float
    sigma2_eps: float
    shrinkage: np.ndarray   # per-area (s2e/n)/(s2e/n + s2g)
    ratio: float            # fitted s2g / s2e
    criterion: float        # profiled -2 log-(restricted) likelihood, constants dropped
    reml: bool


def bhf_profile_criterion(dataset: Dataset, ratio: float, reml: bool = True) -> float:
    """Profiled -2 log-(restricted)likelihood at a given variance ratio."""
    crit, _, _ = _bhf_eval(_bhf_stats(dataset), dataset.n, ratio, reml)
    return crit


def _bhf_stats(dataset: Dataset):
    X1 = np.column_stack([np.ones(dataset.n), dataset.X])
    m = dataset.m
    p1 = X1.shape[1]
    S1x = np.zeros((m, p1))
    Sy = np.zeros(m)
    Sxx = X1.T @ X1
    Sxy = X1.T @ dataset.y
    Syy = float(dataset.y @ dataset.y)
    for i in range(m):
        blk = slice(dataset.starts[i], dataset.starts[i + 1])
        S1x[i] = X1[blk].sum(axis=0)
        Sy[i] = dataset.y[blk].sum()
    return dataset.n_i.astype(float), S1x, Sy, Sxx, Sxy, Syy


def _bhf_eval(stats, n_total, ratio, reml):
    n_i, S1x, Sy, Sxx, Sxy, Syy = stats
    g = ratio / (1.0 + n_i * ratio)
    M = Sxx - (g[:, None] * S1x).T @ S1x
    c = Sxy - (g * Sy) @ S1x
    b = np.linalg.solve(M, c)
    rss = (Syy - 2.0 * b @ Sxy + b @ Sxx @ b
           - float(np.sum(g * (Sy - S1x @ b) ** 2)))
    rss = max(rss, 1e-300)
    p1 = S1x.shape[1]
    df = n_total - p1 if reml else n_total
    crit = float(np.sum(np.log1p(n_i * ratio))) + df * np.log(rss)
    if reml:
        sign, logdet = np.linalg.slogdet(M)
        crit += logdet if sign > 0 else np.inf
    return crit, b, rss


def fit_bhf(dataset: Dataset, reml: bool = True) -> BhfFit:
    """Fit the homogeneous nested-error model by profiling the variance ratio.

    Variance multipliers are ignored (the comparator model has none). The
    ratio search scans a log grid including zero, then polishes by golden
    section; coefficients are the GLS solve at the optimum.
    """
    stats = _bhf_stats(dataset)
    n_total = dataset.n

    def crit(lam):
        return _bhf_eval(stats, n_total, lam, reml)[0]

    grid = np.concatenate([[0.0], np.exp(np.linspace(np.log(1e-8), np.log(1e8), 81))])
    vals = np.array([crit(g) for g in grid])
    best = int(np.argmin(vals))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    lam = _golden_max(lambda v: -crit(v), max(lo, 0.0), max(hi, 1e-12))
    if crit(0.0) <= crit(lam):
        lam = 0.0

    crit_val, b, rss = _bhf_eval(stats, n_total, lam, reml)
    p1 = dataset.p + 1
    df = n_total - p1 if reml else n_total
    s2e = rss / df
    s2g = lam * s2e
    n_i = dataset.n_i.astype(float)
    shrink = (s2e / n_i) / (s2e / n_i + s2g) if s2g > 0 else np.ones(dataset.m)
    return BhfFit(
        beta0=float(b[0]),
        beta=b[1:].copy(),
        sigma2_gamma=float(s2g),
        sigma2_eps=float(s2e),
        shrinkage=shrink,
        ratio=float(lam),
        criterion=float(crit_val),
        reml=reml,
    )


def fit_bhf_reml(dataset: Dataset) -> BhfFit:
    """REML fit of the homogeneous nested-error model."""
    return fit_bhf(dataset, reml=True)
