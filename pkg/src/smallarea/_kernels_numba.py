"""Numba-compiled estimating-equation kernels (hot path).

Mirrors ``_kernels_numpy`` function-for-function; see that module for the
algebra. Loops are written per unit so the compiler produces tight scalar
code; everything is serial and allocation-free inside the IRLS/root loops,
which keeps results deterministic and independent of thread count.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_HUBER, _IDENTITY, _SIGN = 0, 1, 2

_ROOT_MAX_ITER = 120
_ROOT_LOG_TOL = 1e-11


@njit(cache=True)
def _psi_scalar(code, c, tau, r):
    if code == _HUBER:
        base = min(max(r, -c), c)
    elif code == _IDENTITY:
        base = r
    else:
        base = 0.0 if r == 0.0 else (1.0 if r > 0 else -1.0)
    tilt = 2.0 * tau if r > 0 else 2.0 * (1.0 - tau)
    return base * tilt


@njit(cache=True)
def _weight_scalar(code, c, tau, r):
    tilt = 2.0 * tau if r > 0 else 2.0 * (1.0 - tau)
    absr = abs(r)
    if code == _HUBER:
        return tilt * min(1.0, c / max(absr, 1e-300))
    if code == _IDENTITY:
        return tilt
    if absr == 0.0:
        return 0.0
    return tilt / max(absr, 1e-10)


@njit(cache=True)
def _gauss_solve(A, b, x):
    """In-place partial-pivot solve of the tiny IRLS system; returns ok flag."""
    n = A.shape[0]
    scale = 0.0
    for i in range(n):
        for j in range(n):
            if abs(A[i, j]) > scale:
                scale = abs(A[i, j])
    tol = 1e-13 * max(1.0, scale)
    for j in range(n):
        x[j] = b[j]
    for col in range(n):
        piv = col
        best = abs(A[col, col])
        for row in range(col + 1, n):
            if abs(A[row, col]) > best:
                best = abs(A[row, col])
                piv = row
        if best <= tol:
            return False
        if piv != col:
            for j in range(n):
                tmp = A[col, j]
                A[col, j] = A[piv, j]
                A[piv, j] = tmp
            tmp = x[col]
            x[col] = x[piv]
            x[piv] = tmp
        inv = 1.0 / A[col, col]
        for row in range(col + 1, n):
            f = A[row, col] * inv
            if f != 0.0:
                for j in range(col, n):
                    A[row, j] -= f * A[col, j]
                x[row] -= f * x[col]
    for col in range(n - 1, -1, -1):
        acc = x[col]
        for j in range(col + 1, n):
            acc -= A[col, j] * x[j]
        x[col] = acc / A[col, col]
    for j in range(n):
        if not np.isfinite(x[j]):
            return False
    return True


@njit(cache=True)
def irls_beta_area(y, X1, k, starts, area_index, h, s2g, s2e_i, tau_i, code, c,
                   coef0, tol, max_inner):
    m = starts.shape[0] - 1
    p1 = X1.shape[1]
    coef = coef0.copy()
    new = np.empty(p1)
    A = np.empty((p1, p1))
    rhs = np.empty(p1)
    g_l = np.empty(p1)
    t_l = np.empty(p1)
    status = 1
    for _ in range(max_inner):
        for a_ in range(p1):
            rhs[a_] = 0.0
            for b_ in range(p1):
                A[a_, b_] = 0.0
        for l in range(m):
            a = h[l] * s2g
            s0, s1 = starts[l], starts[l + 1]
            ssum = 0.0
            for j in range(s0, s1):
                ssum += 1.0 / (s2e_i * k[j])
            factor = a / (1.0 + a * ssum)
            for a_ in range(p1):
                g_l[a_] = 0.0
                t_l[a_] = 0.0
            ty = 0.0
            for j in range(s0, s1):
                dinv = 1.0 / (s2e_i * k[j])
                u = a + s2e_i * k[j]
                resid = y[j]
                for a_ in range(p1):
                    resid -= X1[j, a_] * coef[a_]
                w = _weight_scalar(code, c, tau_i, resid / np.sqrt(u))
                dw = dinv * w
                for a_ in range(p1):
                    xa = X1[j, a_]
                    g_l[a_] += dinv * xa
                    t_l[a_] += dw * xa
                    rhs[a_] += dw * y[j] * xa
                    for b_ in range(p1):
                        A[a_, b_] += dw * xa * X1[j, b_]
                ty += dw * y[j]
            for a_ in range(p1):
                rhs[a_] -= factor * g_l[a_] * ty
                for b_ in range(p1):
                    A[a_, b_] -= factor * g_l[a_] * t_l[b_]
        ok = _gauss_solve(A, rhs, new)
        if not ok:
            status = 2
            break
        delta = 0.0
        for a_ in range(p1):
            d = abs(new[a_] - coef[a_])
            if d > delta:
                delta = d
            coef[a_] = new[a_]
        if delta < tol:
            status = 0
            break
    return coef, status


@njit(cache=True)
def irls_beta_all(y, X1, k, starts, area_index, h, s2g, s2e, taus, code, c,
                  coefs0, tol, max_inner):
    m = starts.shape[0] - 1
    coefs = np.empty_like(coefs0)
    status = np.zeros(m, dtype=np.int64)
    for i in range(m):
        coef, st = irls_beta_area(y, X1, k, starts, area_index, h, s2g, s2e[i],
                                  taus[i], code, c, coefs0[i], tol, max_inner)
        coefs[i] = coef
        status[i] = st
    return coefs, status


@njit(cache=True)
def sigma_eps_equation(v, resid_blk, k_blk, h_i, s2g, tau_i, code, c, w_i):
    n_l = resid_blk.shape[0]
    a = h_i * s2g
    ssum = 0.0
    kinvsum = 0.0
    for j in range(n_l):
        ssum += 1.0 / (v * k_blk[j])
        kinvsum += 1.0 / k_blk[j]
    factor = a / (1.0 + a * ssum)
    dz = 0.0
    for j in range(n_l):
        u = a + v * k_blk[j]
        su = np.sqrt(u)
        z = su * _psi_scalar(code, c, tau_i, resid_blk[j] / su)
        dz += z / (v * k_blk[j])
    quad = 0.0
    for j in range(n_l):
        dinv = 1.0 / (v * k_blk[j])
        u = a + v * k_blk[j]
        su = np.sqrt(u)
        z = su * _psi_scalar(code, c, tau_i, resid_blk[j] / su)
        vz = dinv * z - factor * dz * dinv
        quad += k_blk[j] * vz * vz
    trace = n_l / v - factor * kinvsum / (v * v)
    return quad - w_i * trace


@njit(cache=True)
def sigma_gamma_equation(g, resid, k, starts, h, s2e, code, c, w_star):
    m = starts.shape[0] - 1
    total = 0.0
    for i in range(m):
        a = g * h[i]
        s0, s1 = starts[i], starts[i + 1]
        ssum = 0.0
        dz = 0.0
        for j in range(s0, s1):
            dinv = 1.0 / (s2e[i] * k[j])
            ssum += dinv
            u = a + s2e[i] * k[j]
            su = np.sqrt(u)
            dz += dinv * su * _psi_scalar(code, c, 0.5, resid[j] / su)
        denom = 1.0 + a * ssum
        total += (dz / denom) ** 2 - w_star * ssum / denom
    return total


@njit(cache=True)
def pooled_residuals(y, X1, starts, coefs):
    n = y.shape[0]
    p1 = X1.shape[1]
    m = starts.shape[0] - 1
    resid = np.empty(n)
    for i in range(m):
        for j in range(starts[i], starts[i + 1]):
            r = y[j]
            for a_ in range(p1):
                r -= X1[j, a_] * coefs[i, a_]
            resid[j] = r
    return resid


@njit(cache=True)
def sigma_eps_root_area(resid_blk, k_blk, h_i, s2g, tau_i,
                        code, c, w_i, lo, hi, prev):
    # warm bracket around the previous iterate, then the full bracket
    have = False
    ta = 0.0
    tb = 0.0
    fa = 0.0
    fb = 0.0
    if prev > 0.0:
        tlo = max(lo, prev / 8.0)
        thi = min(hi, prev * 8.0)
        if tlo < thi:
            f_tlo = sigma_eps_equation(tlo, resid_blk, k_blk, h_i,
                                       s2g, tau_i, code, c, w_i)
            if f_tlo == 0.0:
                return tlo, 0
            f_thi = sigma_eps_equation(thi, resid_blk, k_blk, h_i,
                                       s2g, tau_i, code, c, w_i)
            if f_thi == 0.0:
                return thi, 0
            if (f_tlo > 0) != (f_thi > 0):
                ta, tb, fa, fb = np.log(tlo), np.log(thi), f_tlo, f_thi
                have = True
    if not have:
        flo = sigma_eps_equation(lo, resid_blk, k_blk, h_i,
                                 s2g, tau_i, code, c, w_i)
        if flo == 0.0:
            return lo, 0
        fhi = sigma_eps_equation(hi, resid_blk, k_blk, h_i,
                                 s2g, tau_i, code, c, w_i)
        if fhi == 0.0:
            return hi, 0
        if (flo > 0) == (fhi > 0):
            if flo <= 0:
                return lo, 1
            return hi, 1
        ta, tb, fa, fb = np.log(lo), np.log(hi), flo, fhi
    for it in range(_ROOT_MAX_ITER):
        if tb - ta < _ROOT_LOG_TOL:
            break
        if it % 2 == 0 or fb == fa:
            tm = 0.5 * (ta + tb)
        else:
            tm = tb - fb * (tb - ta) / (fb - fa)
            if not (ta < tm < tb):
                tm = 0.5 * (ta + tb)
        fm = sigma_eps_equation(np.exp(tm), resid_blk, k_blk, h_i,
                                s2g, tau_i, code, c, w_i)
        if fm == 0.0:
            return np.exp(tm), 0
        if (fm > 0) == (fa > 0):
            ta, fa = tm, fm
        else:
            tb, fb = tm, fm
    return np.exp(0.5 * (ta + tb)), 0


@njit(cache=True)
def sigma_eps_root_all(resid, k, starts, area_index, h, s2g, taus,
                       code, c, w, lo, hi, prevs):
    m = starts.shape[0] - 1
    roots = np.empty(m)
    warns = np.zeros(m, dtype=np.int64)
    for i in range(m):
        s0, s1 = starts[i], starts[i + 1]
        root, warn = sigma_eps_root_area(resid[s0:s1], k[s0:s1], h[i], s2g,
                                         taus[i], code, c, w[i],
                                         lo, hi, prevs[i])
        roots[i] = root
        warns[i] = warn
    return roots, warns


@njit(cache=True)
def sigma_gamma_root(resid, k, starts, h, s2e, code, c, w_star, lo, hi, prev):
    have = False
    ta = 0.0
    tb = 0.0
    fa = 0.0
    fb = 0.0
    if prev > 0.0:
        tlo = max(lo, prev / 8.0)
        thi = min(hi, prev * 8.0)
        if tlo < thi:
            f_tlo = sigma_gamma_equation(tlo, resid, k, starts, h, s2e,
                                         code, c, w_star)
            if f_tlo == 0.0:
                return tlo, 0
            f_thi = sigma_gamma_equation(thi, resid, k, starts, h, s2e,
                                         code, c, w_star)
            if f_thi == 0.0:
                return thi, 0
            if (f_tlo > 0) != (f_thi > 0):
                ta, tb, fa, fb = np.log(tlo), np.log(thi), f_tlo, f_thi
                have = True
    if not have:
        flo = sigma_gamma_equation(lo, resid, k, starts, h, s2e, code,
                                   c, w_star)
        if flo == 0.0:
            return lo, 0
        fhi = sigma_gamma_equation(hi, resid, k, starts, h, s2e, code,
                                   c, w_star)
        if fhi == 0.0:
            return hi, 0
        if (flo > 0) == (fhi > 0):
            if flo <= 0:
                return lo, 1
            return hi, 1
        ta, tb, fa, fb = np.log(lo), np.log(hi), flo, fhi
    for it in range(_ROOT_MAX_ITER):
        if tb - ta < _ROOT_LOG_TOL:
            break
        if it % 2 == 0 or fb == fa:
            tm = 0.5 * (ta + tb)
        else:
            tm = tb - fb * (tb - ta) / (fb - fa)
            if not (ta < tm < tb):
                tm = 0.5 * (ta + tb)
        fm = sigma_gamma_equation(np.exp(tm), resid, k, starts, h, s2e,
                                  code, c, w_star)
        if fm == 0.0:
            return np.exp(tm), 0
        if (fm > 0) == (fa > 0):
            ta, fa = tm, fm
        else:
            tb, fb = tm, fm
    return np.exp(0.5 * (ta + tb)), 0
