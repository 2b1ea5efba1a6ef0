"""Real-data diagnostics: model-vs-direct agreement and precision gain.

The agreement statistic sums squared direct/model differences over their
combined variances and compares against a chi-square quantile; the precision
diagnostic reports per-area ratios of estimated coefficients of variation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincinv

from .model import Dataset


def chi2_quantile(q: float, df: int) -> float:
    """Chi-square quantile via the regularized incomplete gamma inverse."""
    if not 0.0 < q < 1.0 or df < 1:
        raise ValueError("need 0 < q < 1 and df >= 1")
    return float(2.0 * gammaincinv(df / 2.0, q))


def direct_variances(dataset: Dataset) -> np.ndarray:
    """Sampling variance of each area mean, s^2_i / n_i; NaN when n_i < 2."""
    out = np.full(dataset.m, np.nan)
    for i in range(dataset.m):
        blk = slice(dataset.starts[i], dataset.starts[i + 1])
        n = dataset.n_i[i]
        if n >= 2:
            out[i] = float(np.var(dataset.y[blk], ddof=1)) / n
    return out


@dataclass
class GofResult:
    statistic: float
    df: int
    critical_95: float
    consistent_with_direct: bool
    excluded_areas: tuple


def wald_gof(direct, model_est, var_direct, mse_model, area_ids=None) -> GofResult:
    """Squared-difference agreement statistic against the 95% chi-square bound.

    Areas with missing/zero variance information are excluded from the sum
    and reported (single-unit areas have no direct variance estimate).
    """
    direct = np.asarray(direct, dtype=float)
    model_est = np.asarray(model_est, dtype=float)
    var_direct = np.asarray(var_direct, dtype=float)
    mse_model = np.asarray(mse_model, dtype=float)
    denom = var_direct + mse_model
    ok = np.isfinite(denom) & (denom > 0)
    stat = float(np.sum((direct[ok] - model_est[ok]) ** 2 / denom[ok]))
    df = int(np.sum(ok))
    if df < 1:
        raise ValueError("no area has a positive combined variance")
    crit = chi2_quantile(0.95, df)
    if area_ids is None:
        excluded = tuple(np.flatnonzero(~ok))
    else:
        excluded = tuple(area_ids[i] for i in np.flatnonzero(~ok))
    return GofResult(stat, df, crit, stat <= crit, excluded)


@dataclass
class CvRatioResult:
    per_area: np.ndarray        # NaN where excluded
    mean_ratio: float
    excluded_areas: tuple


def cv_ratio(direct, var_direct, model_est, rmse_model, area_ids=None) -> CvRatioResult:
    """Per-area ratio of direct to model coefficients of variation.

    Values above 1 mean the model-based estimate is more precise. Areas with
    zero point estimates or missing variances are excluded and reported.
    """
    direct = np.asarray(direct, dtype=float)
    model_est = np.asarray(model_est, dtype=float)
    var_direct = np.asarray(var_direct, dtype=float)
    rmse_model = np.asarray(rmse_model, dtype=float)
    cv_d = np.sqrt(var_direct) / np.abs(direct)
    cv_m = rmse_model / np.abs(model_est)
    ok = (np.isfinite(cv_d) & np.isfinite(cv_m) & (direct != 0)
          & (model_est != 0) & (cv_m > 0))
    per_area = np.full(direct.shape, np.nan)
    per_area[ok] = cv_d[ok] / cv_m[ok]
    if not np.any(ok):
        raise ValueError("no area has usable coefficients of variation")
    if area_ids is None:
        excluded = tuple(np.flatnonzero(~ok))
    else:
        excluded = tuple(area_ids[i] for i in np.flatnonzero(~ok))
    return CvRatioResult(per_area, float(np.nanmean(per_area)), excluded)
