"""Point predictors of the small-area means.

All predictors combine the area sample mean with a synthetic regression
component; they differ in which fit supplies the coefficients and in how the
shrinkage weight ``(s2e/n) / (s2e/n + s2g)`` is formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .influence import PsiSpec
from .mle import BhfFit
from .model import Dataset, FitResult


def shrinkage(sigma2_eps: float, n: int, sigma2_gamma: float) -> float:
    """Weight pulling the direct mean toward the synthetic part; 1 if both variances vanish."""
    a = sigma2_eps / n
    if a == 0.0 and sigma2_gamma == 0.0:
        return 1.0
    return a / (a + sigma2_gamma)


def _shrinkage_vec(sigma2_eps, n_i, sigma2_gamma):
    a = np.asarray(sigma2_eps, dtype=float) / np.asarray(n_i, dtype=float)
    with np.errstate(invalid="ignore"):
        out = a / (a + sigma2_gamma)
    return np.where((a == 0.0) & (sigma2_gamma == 0.0), 1.0, out)


def direct(dataset: Dataset) -> np.ndarray:
    """Per-area sample means."""
    ybar, _ = dataset.area_means()
    return ybar


def ebp(dataset: Dataset, fit: FitResult) -> np.ndarray:
    """Empirical best predictor under the area-heterogeneous model."""
    ybar, xbar = dataset.area_means()
    B = _shrinkage_vec(fit.sigma2_eps, dataset.n_i, fit.sigma2_gamma)
    synth = fit.beta0 + np.einsum("ij,ij->i", dataset.Xbar, fit.betas)
    resid = ybar - fit.beta0 - np.einsum("ij,ij->i", xbar, fit.betas)
    return synth + (1.0 - B) * resid


def ebp_survey_form(dataset: Dataset, fit: FitResult) -> np.ndarray:
    """Survey-regression rewrite of :func:`ebp`; algebraically identical."""
    ybar, xbar = dataset.area_means()
    B = _shrinkage_vec(fit.sigma2_eps, dataset.n_i, fit.sigma2_gamma)
    gap = np.einsum("ij,ij->i", dataset.Xbar - xbar, fit.betas)
    resid = ybar - fit.beta0 - np.einsum("ij,ij->i", xbar, fit.betas)
    return ybar + gap - B * resid


def ebp_finite(dataset: Dataset, fit: FitResult) -> np.ndarray:
    """Finite-population version: sampling-fraction mix of sample mean and EBP."""
    ybar, _ = dataset.area_means()
    f = dataset.n_i / dataset.N
    return f * ybar + (1.0 - f) * ebp(dataset, fit)


def eblup_bhf(dataset: Dataset, bhf: BhfFit) -> np.ndarray:
    """Classical predictor under the homogeneous model."""
    ybar, xbar = dataset.area_means()
    synth = bhf.beta0 + dataset.Xbar @ bhf.beta
    resid = ybar - bhf.beta0 - xbar @ bhf.beta
    return synth + (1.0 - bhf.shrinkage) * resid


def mq_synthetic(dataset: Dataset, area_taus, c: float = 1.345,
                 coef_by_tau: dict | None = None) -> np.ndarray:
    """Synthetic regression predictor at each area's tilt level.

    Coefficients come from the tilted regression fit at the area's tau;
    ``coef_by_tau`` can supply already-fitted grid coefficients keyed by tau.
    """
    from .mquantile import fit_mquantile

    area_taus = np.asarray(area_taus, dtype=float)
    out = np.empty(dataset.m)
    cache = dict(coef_by_tau) if coef_by_tau else {}
    for i in range(dataset.m):
        t = float(area_taus[i])
        if t not in cache:
            cache[t] = fit_mquantile(dataset, t, c)
        coef = cache[t]
        out[i] = coef[0] + dataset.Xbar[i] @ coef[1:]
    return out


def mqcd(dataset: Dataset, area_betas) -> np.ndarray:
    """Survey-regression estimator with externally supplied slopes (no shrinkage)."""
    ybar, xbar = dataset.area_means()
    betas = np.asarray(area_betas, dtype=float).reshape(dataset.m, dataset.p)
    return ybar + np.einsum("ij,ij->i", dataset.Xbar - xbar, betas)


@dataclass
class PredictorSet:
    """Per-area values of every implemented predictor plus shrinkage weights."""

    area_ids: tuple
    direct: np.ndarray
    eblup_bhf: np.ndarray
    ebp: np.ndarray
    ebp_mle: np.ndarray | None
    ebp_finite: np.ndarray
    mq_synth: np.ndarray
    mqcd: np.ndarray
    shrinkage_model: np.ndarray
    shrinkage_bhf: np.ndarray


def compute_all(dataset: Dataset, fit: FitResult, bhf: BhfFit, tau_estimates=None,
                psi: PsiSpec = PsiSpec(), mle_fit: FitResult | None = None) -> PredictorSet:
    """Evaluate every predictor on one dataset.

    ``tau_estimates`` (from the tilt-estimation module) drives the synthetic
    and survey-regression tilted predictors; without it both use tau = 0.5.
    ``mle_fit`` is optional because the likelihood fitter requires unit
    variance multipliers.
    """
    from .mquantile import fit_mquantile

    if tau_estimates is not None:
        area_taus = np.asarray(tau_estimates.elb_tau, dtype=float)
    else:
        area_taus = np.full(dataset.m, 0.5)
    cache: dict[float, np.ndarray] = {}
    for t in np.unique(area_taus):
        cache[float(t)] = fit_mquantile(dataset, float(t), psi.c)
    mq_betas = np.stack([cache[float(t)][1:] for t in area_taus])
    return PredictorSet(
        area_ids=dataset.area_ids,
        direct=direct(dataset),
        eblup_bhf=eblup_bhf(dataset, bhf),
        ebp=ebp(dataset, fit),
        ebp_mle=ebp(dataset, mle_fit) if mle_fit is not None else None,
        ebp_finite=ebp_finite(dataset, fit),
        mq_synth=mq_synthetic(dataset, area_taus, psi.c, coef_by_tau=cache),
        mqcd=mqcd(dataset, mq_betas),
        shrinkage_model=_shrinkage_vec(fit.sigma2_eps, dataset.n_i, fit.sigma2_gamma),
        shrinkage_bhf=bhf.shrinkage.copy(),
    )
