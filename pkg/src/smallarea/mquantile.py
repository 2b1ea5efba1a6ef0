"""Tilted regression over a grid of tilt levels and per-area tilt estimation.

A tilted regression at level tau solves

    sum_j psi_tau((y_j - b0 - x_j'b) / s) * (1, x_j)' = 0

by iteratively reweighted least squares, with the robust scale s refreshed
each iteration. Each unit is then assigned the grid level whose fitted line
passes closest to it, and the per-area averages of those unit levels are
shrunk toward their grand mean with moment-estimated variance components.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gee import SingularDesignError
from .influence import HUBER, PsiSpec, psi as psi_eval, psi_deriv
from .model import Dataset

_MAD_TO_SD = 0.6745


@dataclass(frozen=True)
class TauGrid:
    """Strictly increasing tilt levels inside [0.01, 0.99]."""

    values: tuple[float, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("grid must be a nonempty 1-d sequence")
        if np.any(np.diff(v) <= 0):
            raise ValueError("grid values must be strictly increasing")
        if v[0] < 0.01 or v[-1] > 0.99:
            raise ValueError("grid values must lie within [0.01, 0.99]")

    @classmethod
    def default(cls) -> "TauGrid":
        # central band: extreme tilt levels make the one-sided variance
        # statistics unstable without buying prediction accuracy
        return cls(tuple(np.round(np.arange(0.30, 0.701, 0.02), 10)))

    @classmethod
    def from_spec(cls, lo: float, hi: float, step: float) -> "TauGrid":
        count = int(round((hi - lo) / step)) + 1
        return cls(tuple(np.round(lo + step * np.arange(count), 10)))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass
class TauEstimates:
    """Unit tilt levels, their area means, and the shrunken area predictions."""

    unit_tau: np.ndarray
    area_mean_tau: np.ndarray
    elb_tau: np.ndarray
    mu_hat: float
    eta2_hat: float
    nu2_hat: float
    shrink_weight: np.ndarray


def fit_mquantile(dataset_or_xy, tau: float, c: float = 1.345, tol: float = 1e-8,
                  max_iter: int = 100) -> np.ndarray:
    """Tilted-regression coefficients (intercept first) at tilt level ``tau``.

    Accepts a Dataset or an ``(y, X)`` pair. Scale is the median absolute
    residual divided by 0.6745, recomputed every iteration; convergence is a
    coefficient change below ``tol``.
    """
    if isinstance(dataset_or_xy, Dataset):
        y, X = dataset_or_xy.y, dataset_or_xy.X
    else:
        y, X = dataset_or_xy
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
    n = y.shape[0]
    X1 = np.column_stack([np.ones(n), X])
    spec = PsiSpec(HUBER, c, tau)

    coef, *_ = np.linalg.lstsq(X1, y, rcond=None)
    tiny = 1e-9 * max(1.0, float(np.median(np.abs(y))))
    for _ in range(max_iter):
        resid = y - X1 @ coef
        scale = np.median(np.abs(resid)) / _MAD_TO_SD
        if scale <= tiny:
            break  # interpolating fit: residuals at rounding noise
        r = resid / scale
        w = np.where(r == 0.0, psi_deriv(spec, 0.0), psi_eval(spec, r) / np.where(r == 0.0, 1.0, r))
        A = X1.T @ (X1 * w[:, None])
        rhs = X1.T @ (w * y)
        if abs(np.linalg.det(A)) <= 1e-13 * max(1.0, np.abs(A).max() ** X1.shape[1]):
            raise SingularDesignError(f"rank-deficient weighted design at tau={tau}")
        new = np.linalg.solve(A, rhs)
        delta = float(np.max(np.abs(new - coef)))
        coef = new
        if delta < tol:
            break
    return coef


def fit_grid(dataset: Dataset, grid: TauGrid, c: float = 1.345) -> np.ndarray:
    """Coefficients for every grid level, shape (len(grid), p + 1)."""
    return np.stack([fit_mquantile(dataset, t, c) for t in grid.values])


def unit_coefficients(dataset: Dataset, grid: TauGrid, c: float = 1.345,
                      grid_coefs: np.ndarray | None = None) -> np.ndarray:
    """Per-unit tilt level: the grid line with the smallest absolute prediction error.

    Exact ties go to the level closest to 0.5, then to the smaller level.
    """
    if grid_coefs is None:
        grid_coefs = fit_grid(dataset, grid, c)
    X1 = np.column_stack([np.ones(dataset.n), dataset.X])
    errs = np.abs(dataset.y[:, None] - X1 @ grid_coefs.T)  # (n, G)
    g = grid.array
    # lexicographic preference among exact ties: |tau - 0.5| then tau
    order = np.lexsort((g, np.abs(g - 0.5)))
    best = np.full(dataset.n, -1, dtype=np.int64)
    min_err = errs.min(axis=1)
    for col in order[::-1]:
        best = np.where(errs[:, col] == min_err, col, best)
    return g[best]


def elb_tau(dataset: Dataset, unit_tau: np.ndarray, grid: TauGrid) -> TauEstimates:
    """Shrink per-area mean tilt levels toward the grand mean.

    Moment estimates: the within-area variance pools squared deviations over
    n - m degrees of freedom; the between-area variance subtracts the average
    sampling contribution and truncates at zero. The shrink weight degenerates
    to full shrinkage when both variance estimates vanish.
    """
    m = dataset.m
    n_i = dataset.n_i.astype(float)
    area_mean = np.empty(m)
    within_ss = 0.0
    for i in range(m):
        blk = slice(dataset.starts[i], dataset.starts[i + 1])
        vals = unit_tau[blk]
        area_mean[i] = vals.mean()
        within_ss += float(np.sum((vals - area_mean[i]) ** 2))
    mu = float(np.mean(area_mean))
    df = dataset.n - m
    nu2 = within_ss / df if df > 0 else 0.0
    between = float(np.sum((area_mean - mu) ** 2)) / (m - 1)
    eta2 = max(0.0, between - nu2 * float(np.mean(1.0 / n_i)))
    with np.errstate(invalid="ignore"):
        B = (nu2 / n_i) / (nu2 / n_i + eta2)
    B = np.where((nu2 == 0.0) & (eta2 == 0.0), 1.0, B)
    shrunk = (1.0 - B) * area_mean + B * mu
    lo, hi = grid.values[0], grid.values[-1]
    return TauEstimates(
        unit_tau=np.asarray(unit_tau, dtype=float),
        area_mean_tau=area_mean,
        elb_tau=np.clip(shrunk, lo, hi),
        mu_hat=mu,
        eta2_hat=float(eta2),
        nu2_hat=float(nu2),
        shrink_weight=B,
    )


def estimate_taus(dataset: Dataset, grid: TauGrid | None = None,
                  c: float = 1.345) -> TauEstimates:
    """Full tilt-estimation pipeline: grid fits, unit levels, shrinkage."""
    if grid is None:
        grid = TauGrid.default()
    coefs = fit_grid(dataset, grid, c)
    unit = unit_coefficients(dataset, grid, c, grid_coefs=coefs)
    return elb_tau(dataset, unit, grid)
