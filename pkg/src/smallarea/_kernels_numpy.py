"""Vectorized numpy implementations of the estimating-equation kernels.

Reference backend: the numba kernels in ``_kernels_numba`` mirror these
semantics loop-by-loop. All covariance algebra exploits the rank-one
structure V = a * 11' + v * K (a = h * sigma2_gamma, v = sigma2_eps), so a
Sherman-Morrison step replaces every dense inverse:

    V^-1 x = d*x - a/(1 + a*s) * (d.x) * d,   d = 1/(v*k),  s = sum(d)

Scalar roots are bracketed on the log scale with alternating
bisection/secant steps, which is deterministic and immune to the kinks a
clipped influence function introduces.
"""

from __future__ import annotations

import numpy as np

# psi base codes (match influence.PSI_*)
_HUBER, _IDENTITY, _SIGN = 0, 1, 2

_ROOT_MAX_ITER = 120
_ROOT_LOG_TOL = 1e-11


def _psi_vec(code, c, tau, r):
    if code == _HUBER:
        base = np.clip(r, -c, c)
    elif code == _IDENTITY:
        base = r
    else:
        base = np.sign(r)
    return base * np.where(r > 0, 2.0 * tau, 2.0 * (1.0 - tau))


def _weight_vec(code, c, tau, r):
    """psi(r)/r elementwise, with the left-limit derivative at r = 0."""
    tilt = np.where(r > 0, 2.0 * tau, 2.0 * (1.0 - tau))
    absr = np.abs(r)
    if code == _HUBER:
        return tilt * np.minimum(1.0, c / np.maximum(absr, 1e-300))
    if code == _IDENTITY:
        return tilt
    # sign base: 1/|r| weight, floored to keep the linearized system finite
    out = tilt / np.maximum(absr, 1e-10)
    return np.where(absr == 0.0, 0.0, out)


def _gauss_solve(A, b):
    """Partial-pivot elimination for the tiny IRLS systems; returns (x, ok)."""
    n = A.shape[0]
    M = A.copy()
    x = b.copy()
    scale = np.max(np.abs(M)) if n else 0.0
    tol = 1e-13 * max(1.0, scale)
    for col in range(n):
        piv = col + int(np.argmax(np.abs(M[col:, col])))
        if abs(M[piv, col]) <= tol:
            return x, False
        if piv != col:
            M[[col, piv]] = M[[piv, col]]
            x[col], x[piv] = x[piv], x[col]
        inv = 1.0 / M[col, col]
        for row in range(col + 1, n):
            f = M[row, col] * inv
            if f != 0.0:
                M[row, col:] -= f * M[col, col:]
                x[row] -= f * x[col]
    for col in range(n - 1, -1, -1):
        x[col] = (x[col] - M[col, col + 1:] @ x[col + 1:]) / M[col, col]
    if not np.all(np.isfinite(x)):
        return x, False
    return x, True


def _block_sums(values, starts):
    """Per-block sums along axis 0 for contiguous area blocks."""
    return np.add.reduceat(values, starts[:-1], axis=0)


def irls_beta_area(y, X1, k, starts, area_index, h, s2g, s2e_i, tau_i, code, c,
                   coef0, tol, max_inner):
    """Solve the pooled coefficient equations for one area by IRLS.

    Returns (coef, status): status 0 converged, 1 iteration cap, 2 singular.
    """
    a_l = h * s2g                       # (m,)
    dinv = 1.0 / (s2e_i * k)            # (n,)
    u = a_l[area_index] + s2e_i * k     # diag of V, per unit
    su = np.sqrt(u)
    ssum = _block_sums(dinv, starts)    # (m,)
    factor = a_l / (1.0 + a_l * ssum)   # (m,)
    fac_u = factor[area_index]

    coef = coef0.astype(float).copy()
    status = 1
    for _ in range(max_inner):
        resid = y - X1 @ coef
        r = resid / su
        w = _weight_vec(code, c, tau_i, r)
        dw = dinv * w
        B = X1 * dw[:, None]                     # D^-1 W X1 rows
        g_l = _block_sums(X1 * dinv[:, None], starts)   # (m, p1): X1' d per block
        t_l = _block_sums(B, starts)                    # (m, p1): d' W X1 per block
        A = X1.T @ B - (g_l * factor[:, None]).T @ t_l
        rhs = X1.T @ (dw * y) - (g_l * factor[:, None]).T @ _block_sums(dw * y, starts)
        new, ok = _gauss_solve(A, rhs)
        if not ok:
            status = 2
            break
        delta = np.max(np.abs(new - coef))
        coef = new
        if delta < tol:
            status = 0
            break
    return coef, status


def irls_beta_all(y, X1, k, starts, area_index, h, s2g, s2e, taus, code, c,
                  coefs0, tol, max_inner):
    m = starts.shape[0] - 1
    coefs = np.empty_like(coefs0, dtype=float)
    status = np.zeros(m, dtype=np.int64)
    for i in range(m):
        coefs[i], status[i] = irls_beta_area(
            y, X1, k, starts, area_index, h, s2g, s2e[i], taus[i], code, c,
            coefs0[i], tol, max_inner,
        )
    return coefs, status


def pooled_residuals(y, X1, starts, coefs):
    """Stacked residuals with each block using its own coefficient row."""
    resid = np.empty_like(y)
    m = starts.shape[0] - 1
    for i in range(m):
        blk = slice(starts[i], starts[i + 1])
        resid[blk] = y[blk] - X1[blk] @ coefs[i]
    return resid


def sigma_eps_equation(v, resid_blk, k_blk, h_i, s2g, tau_i, code, c, w_i):
    """Own-block unit-variance estimating equation for one area, at candidate v.

    ``resid_blk`` holds the area's residuals (shared intercept, own slope);
    the area-effect part of the covariance enters through the rank-one
    structure with the previous shared variance.
    """
    a = h_i * s2g
    u = a + v * k_blk
    su = np.sqrt(u)
    dinv = 1.0 / (v * k_blk)
    ssum = float(np.sum(dinv))
    factor = a / (1.0 + a * ssum)

    z = su * _psi_vec(code, c, tau_i, resid_blk / su)
    dz = float(np.sum(dinv * z))
    vinv_z = dinv * z - factor * dz * dinv
    quad = float(np.sum(k_blk * vinv_z * vinv_z))

    n_l = k_blk.shape[0]
    kinvsum = float(np.sum(1.0 / k_blk))
    trace = n_l / v - factor * kinvsum / (v * v)
    return quad - w_i * trace


def sigma_gamma_equation(g, resid, k, starts, h, s2e, code, c, w_star):
    """Global area-variance estimating equation at candidate g."""
    n_l = np.diff(starts)
    area_index = np.repeat(np.arange(starts.shape[0] - 1), n_l)
    a = g * h
    dinv = 1.0 / (s2e[area_index] * k)
    ssum = _block_sums(dinv, starts)
    u = a[area_index] + s2e[area_index] * k
    su = np.sqrt(u)
    z = su * _psi_vec(code, c, 0.5, resid / su)
    dz = _block_sums(dinv * z, starts)
    denom = 1.0 + a * ssum
    return float(np.sum((dz / denom) ** 2 - w_star * ssum / denom))


def _root_iterate(f, ta, tb, fa, fb):
    for it in range(_ROOT_MAX_ITER):
        if tb - ta < _ROOT_LOG_TOL:
            break
        if it % 2 == 0 or fb == fa:
            tm = 0.5 * (ta + tb)
        else:
            tm = tb - fb * (tb - ta) / (fb - fa)
            if not (ta < tm < tb):
                tm = 0.5 * (ta + tb)
        fm = f(np.exp(tm))
        if fm == 0.0:
            return float(np.exp(tm))
        if (fm > 0) == (fa > 0):
            ta, fa = tm, fm
        else:
            tb, fb = tm, fm
    return float(np.exp(0.5 * (ta + tb)))


def _bracketed_root(f, lo, hi, prev):
    """Root of f on [lo, hi] (log scale); returns (root, warn).

    A tight bracket around ``prev`` (the previous iterate) is probed first.
    Without any sign change over the full bracket, the root clamps to lo when
    f(lo) <= 0 (no signal above the floor) and to hi otherwise, with warn = 1.
    """
    if prev > 0.0:
        tlo = max(lo, prev / 8.0)
        thi = min(hi, prev * 8.0)
        if tlo < thi:
            f_tlo = f(tlo)
            if f_tlo == 0.0:
                return tlo, 0
            f_thi = f(thi)
            if f_thi == 0.0:
                return thi, 0
            if (f_tlo > 0) != (f_thi > 0):
                return _root_iterate(f, np.log(tlo), np.log(thi), f_tlo, f_thi), 0
    flo = f(lo)
    if flo == 0.0:
        return lo, 0
    fhi = f(hi)
    if fhi == 0.0:
        return hi, 0
    if (flo > 0) == (fhi > 0):
        return (lo, 1) if flo <= 0 else (hi, 1)
    return _root_iterate(f, np.log(lo), np.log(hi), flo, fhi), 0


def sigma_eps_root_area(resid_blk, k_blk, h_i, s2g, tau_i, code, c, w_i,
                        lo, hi, prev):
    def f(v):
        return sigma_eps_equation(v, resid_blk, k_blk, h_i, s2g, tau_i, code,
                                  c, w_i)

    return _bracketed_root(f, lo, hi, prev)


def sigma_eps_root_all(resid, k, starts, area_index, h, s2g, taus,
                       code, c, w, lo, hi, prevs):
    m = starts.shape[0] - 1
    roots = np.empty(m)
    warns = np.zeros(m, dtype=np.int64)
    for i in range(m):
        blk = slice(starts[i], starts[i + 1])
        roots[i], warns[i] = sigma_eps_root_area(
            resid[blk], k[blk], h[i], s2g, taus[i], code, c,
            w[i], lo, hi, prevs[i],
        )
    return roots, warns


def sigma_gamma_root(resid, k, starts, h, s2e, code, c, w_star, lo, hi, prev):
    def f(g):
        return sigma_gamma_equation(g, resid, k, starts, h, s2e, code, c,
                                    w_star)

    return _bracketed_root(f, lo, hi, prev)
