"""Robust pooled estimating-equation fitter for area-specific parameters.

Each area i gets its own coefficient vector and unit-level variance, but the
estimating equations for area i pool data from *all* areas: the tilt level
tau_i of the influence function selects which part of the pooled response
distribution identifies area i. One outer iteration performs

  1. per-area IRLS solve of the coefficient equations (previous variances),
  2. per-area bracketed root solve for the unit-level variance,
  3. global intercept = mean of the per-area intercepts, then a bracketed
     root solve for the shared area-effect variance with the untilted psi.

Outer iterations repeat until the largest (scaled) parameter change drops
below ``FitControl.tol``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .influence import PsiSpec, expected_square, expected_square_cached
from .model import GEE, Dataset, FitResult, ParamVector, validate


class SingularDesignError(RuntimeError):
    """Raised when a weighted coefficient system is rank deficient."""


@dataclass(frozen=True)
class FitControl:
    """Convergence and bracketing knobs for the iterative fitters."""

    tol: float = 1e-6
    max_iter: int = 200
    var_floor: float = 1e-8
    bracket_max: float | None = None  # default: 1e6 * var(y)
    max_inner: int = 100

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1 or self.var_floor <= 0:
            raise ValueError("tol and var_floor must be positive, max_iter >= 1")
        if self.bracket_max is not None and self.bracket_max <= self.var_floor:
            raise ValueError("bracket_max must exceed var_floor")


def _bracket_hi(dataset: Dataset, ctl: FitControl) -> float:
    if ctl.bracket_max is not None:
        return ctl.bracket_max
    return 1e6 * max(float(np.var(dataset.y)), 1e-6)


def _design(dataset: Dataset) -> np.ndarray:
    return np.column_stack([np.ones(dataset.n), dataset.X])


def _as_taus(dataset: Dataset, taus) -> np.ndarray:
    if taus is None:
        return np.full(dataset.m, 0.5)
    arr = np.asarray(taus, dtype=float)
    if arr.ndim == 0:
        return np.full(dataset.m, float(arr))
    if arr.shape != (dataset.m,):
        raise ValueError(f"taus must have length m={dataset.m}")
    return arr.copy()


def initial_values(dataset: Dataset, taus=None) -> list[ParamVector]:
    """Starting values: a homogeneous mixed-model fit replicated into every area."""
    from .mle import fit_bhf_reml

    bhf = fit_bhf_reml(dataset)
    tau_arr = _as_taus(dataset, taus)
    return [
        ParamVector(bhf.beta0, tuple(bhf.beta), bhf.sigma2_gamma, bhf.sigma2_eps,
                    float(tau_arr[i]))
        for i in range(dataset.m)
    ]


def _initial_state(dataset: Dataset, taus, ctl: FitControl):
    from .mle import fit_bhf_reml

    bhf = fit_bhf_reml(dataset)
    m = dataset.m
    alpha0 = np.full(m, bhf.beta0)
    betas = np.tile(np.asarray(bhf.beta, dtype=float), (m, 1))
    s2e = np.full(m, max(bhf.sigma2_eps, ctl.var_floor))
    s2g = max(bhf.sigma2_gamma, ctl.var_floor)
    return alpha0, betas, s2e, s2g, bhf.beta0


def fit(dataset: Dataset, psi: PsiSpec = PsiSpec(), taus=None,
        ctl: FitControl = FitControl(), init: FitResult | None = None) -> FitResult:
    """Run the pooled estimating-equation algorithm to convergence.

    ``taus`` may be None (all 0.5), a scalar, or a length-m vector (typically
    the shrunken unit-level tilt estimates). ``init`` warm-starts from an
    earlier fit; by default starting values come from the homogeneous fit.
    Non-convergence is reported on the result, not raised; only a singular
    weighted system raises.
    """
    problems = validate(dataset)
    if problems:
        raise ValueError("invalid dataset: " + "; ".join(problems))
    tau_arr = _as_taus(dataset, taus)
    ker = backend.kernels()
    X1 = _design(dataset)
    m, p = dataset.m, dataset.p

    if init is not None:
        alpha0 = init.alpha0.copy() if init.alpha0 is not None else np.full(m, init.beta0)
        betas = np.asarray(init.betas, dtype=float).copy()
        s2e = np.maximum(np.asarray(init.sigma2_eps, dtype=float), ctl.var_floor)
        s2g = max(float(init.sigma2_gamma), ctl.var_floor)
        beta0 = float(init.beta0)
    else:
        alpha0, betas, s2e, s2g, beta0 = _initial_state(dataset, tau_arr, ctl)

    w = np.array([expected_square_cached(psi.base, psi.c, float(t)) for t in tau_arr])
    w_star = expected_square_cached(psi.base, psi.c, 0.5)
    lo = ctl.var_floor
    hi = _bracket_hi(dataset, ctl)

    args = (dataset.y, X1, dataset.k, dataset.starts, dataset.area_index, dataset.h)
    coefs = np.column_stack([alpha0, betas])
    trace: list[float] = []
    warnings: list[str] = []
    converged = False
    iterations = 0
    delta = np.inf

    for t in range(1, ctl.max_iter + 1):
        iterations = t
        old = np.concatenate([coefs.ravel(), s2e, [s2g, beta0]])

        coefs, status = ker.irls_beta_all(*args, s2g, s2e, tau_arr, psi.code,
                                          psi.c, coefs, ctl.tol, ctl.max_inner)
        if np.any(status == 2):
            bad = int(np.argmax(status == 2))
            raise SingularDesignError(
                f"singular weighted system for area {dataset.area_ids[bad]!r}"
            )
        if np.any(status == 1):
            warnings.append(f"iteration {t}: {int(np.sum(status == 1))} coefficient "
                            "solves hit the inner iteration cap")

        beta0 = float(np.mean(coefs[:, 0]))
        gcoefs = np.column_stack([np.full(m, beta0), coefs[:, 1:]])
        resid = ker.pooled_residuals(dataset.y, X1, dataset.starts, gcoefs)
        resid_tilt = ker.pooled_residuals(dataset.y, X1, dataset.starts, coefs)

        s2e, warns_e = ker.sigma_eps_root_all(resid_tilt, dataset.k, dataset.starts,
                                              dataset.area_index, dataset.h, s2g,
                                              tau_arr, psi.code, psi.c, w, lo, hi,
                                              s2e)
        if np.any(warns_e):
            warnings.append(f"iteration {t}: {int(np.sum(warns_e))} unit-variance "
                            "equations had no sign change over the bracket")

        s2g_new, warn_g = ker.sigma_gamma_root(resid, dataset.k, dataset.starts,
                                               dataset.h, s2e, psi.code, psi.c,
                                               w_star, lo, hi, s2g)
        s2g = float(s2g_new)
        if warn_g:
            warnings.append(f"iteration {t}: area-variance equation had no sign "
                            "change over the bracket")

        new = np.concatenate([coefs.ravel(), s2e, [s2g, beta0]])
        delta = float(np.max(np.abs(new - old) / np.maximum(1.0, np.abs(old))))
        trace.append(delta)
        if delta < ctl.tol:
            converged = True
            break

    return FitResult(
        method=GEE,
        beta0=beta0,
        betas=coefs[:, 1:].copy(),
        sigma2_gamma=s2g,
        sigma2_eps=np.asarray(s2e, dtype=float),
        taus=tau_arr,
        iterations=iterations,
        converged=converged,
        max_param_delta=delta if np.isfinite(delta) else float("nan"),
        alpha0=coefs[:, 0].copy(),
        trace=trace,
        warnings=warnings,
    )


def solve_beta(dataset: Dataset, i: int, state: FitResult, psi: PsiSpec,
               ctl: FitControl = FitControl()):
    """One pooled IRLS coefficient solve for area ``i`` at the state's variances."""
    ker = backend.kernels()
    X1 = _design(dataset)
    alpha0 = state.alpha0 if state.alpha0 is not None else np.full(dataset.m, state.beta0)
    coef0 = np.concatenate([[alpha0[i]], state.betas[i]])
    coef, status = ker.irls_beta_area(
        dataset.y, X1, dataset.k, dataset.starts, dataset.area_index, dataset.h,
        float(state.sigma2_gamma), float(state.sigma2_eps[i]), float(state.taus[i]),
        psi.code, psi.c, coef0, ctl.tol, ctl.max_inner,
    )
    if status == 2:
        raise SingularDesignError(f"singular weighted system for area index {i}")
    return float(coef[0]), coef[1:].copy()


def pooled_residuals(dataset: Dataset, state: FitResult) -> np.ndarray:
    """Residual stack for the variance equations: shared intercept, block-own slopes."""
    ker = backend.kernels()
    X1 = _design(dataset)
    coefs = np.column_stack([np.full(dataset.m, state.beta0),
                             np.asarray(state.betas, dtype=float)])
    return ker.pooled_residuals(dataset.y, X1, dataset.starts, coefs)


def solve_sigma_eps(dataset: Dataset, i: int, state: FitResult, psi: PsiSpec,
                    ctl: FitControl = FitControl()):
    """Bracketed root of area ``i``'s unit-variance equation; returns (value, warned)."""
    ker = backend.kernels()
    resid = pooled_residuals(dataset, state)
    blk = slice(dataset.starts[i], dataset.starts[i + 1])
    w_i = expected_square_cached(psi.base, psi.c, float(state.taus[i]))
    root, warn = ker.sigma_eps_root_area(
        resid[blk], dataset.k[blk], float(dataset.h[i]),
        float(state.sigma2_gamma), float(state.taus[i]), psi.code, psi.c,
        w_i, ctl.var_floor, _bracket_hi(dataset, ctl),
        float(state.sigma2_eps[i]),
    )
    return float(root), bool(warn)


def solve_sigma_gamma(dataset: Dataset, state: FitResult, psi: PsiSpec,
                      ctl: FitControl = FitControl()):
    """Bracketed root of the shared area-variance equation; returns (value, warned)."""
    ker = backend.kernels()
    resid = pooled_residuals(dataset, state)
    w_star = expected_square_cached(psi.base, psi.c, 0.5)
    root, warn = ker.sigma_gamma_root(
        resid, dataset.k, dataset.starts, dataset.h,
        np.asarray(state.sigma2_eps, dtype=float), psi.code, psi.c,
        w_star, ctl.var_floor, _bracket_hi(dataset, ctl),
        float(state.sigma2_gamma),
    )
    return float(root), bool(warn)


def fit_virtual_area(dataset: Dataset, tau: float, psi: PsiSpec,
                     reduced_fit: FitResult, s2e_init: float,
                     coef_init: np.ndarray, ctl: FitControl = FitControl()):
    """Estimate one area's (intercept, slope, unit variance) from pooled data only.

    Used for leave-one-area-out parameter sets: the removed area contributes
    no units, but its equations are still identified by the remaining blocks
    through its tilt ``tau``. The variance root reuses the reduced fit's
    residual stack (which does not involve the removed area); the coefficient
    solve then runs at that variance.
    """
    ker = backend.kernels()
    X1 = _design(dataset)
    w_i = expected_square_cached(psi.base, psi.c, float(tau))
    lo = ctl.var_floor
    hi = _bracket_hi(dataset, ctl)
    s2g = float(reduced_fit.sigma2_gamma)
    resid = pooled_residuals(dataset, reduced_fit)

    # the removed area has no block of its own, so its unit variance comes
    # from the equation pooled over the remaining blocks at its tilt
    def pooled_eq(v):
        total = 0.0
        for l in range(dataset.m):
            blk = slice(dataset.starts[l], dataset.starts[l + 1])
            total += ker.sigma_eps_equation(v, resid[blk], dataset.k[blk],
                                            float(dataset.h[l]), s2g, float(tau),
                                            psi.code, psi.c, w_i)
        return total

    from ._kernels_numpy import _bracketed_root

    s2e, _warn = _bracketed_root(pooled_eq, lo, hi, max(float(s2e_init), lo))
    coef, status = ker.irls_beta_area(
        dataset.y, X1, dataset.k, dataset.starts, dataset.area_index, dataset.h,
        s2g, float(s2e), float(tau), psi.code, psi.c,
        np.asarray(coef_init, dtype=float), ctl.tol, ctl.max_inner)
    if status == 2:
        raise SingularDesignError("singular weighted system for removed area")
    return float(coef[0]), coef[1:].copy(), float(s2e)
