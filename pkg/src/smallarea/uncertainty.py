"""Uncertainty estimators for small-area predictors.

A measure is f(E[d(prediction, target)]) for a distance d and a transform f;
root mean squared error is (squared error, sqrt), its relative version also
divides by the mean prediction. Three estimators are provided: the analytic
leading-term value, a parametric bootstrap (Steps: simulate from the fitted
model, recompute target and prediction, average the distances, transform),
and a delete-one-area jackknife correction of the bootstrap. All bootstrap
evaluations inside one jackknife call share one stream of standard normal
draws so that differences reflect parameter perturbation only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gee, predict
from .gee import FitControl
from .influence import PsiSpec
from .model import Dataset, FitResult

SQUARED_ERROR = "squared_error"
ABSOLUTE_ERROR = "absolute_error"

NAIVE = "naive"
BOOTSTRAP = "bootstrap"
MCJACK = "mcjack"


@dataclass(frozen=True)
class MeasureSpec:
    """Distance plus transform pipeline applied to the averaged distance."""

    distance: str = SQUARED_ERROR
    transforms: tuple[str, ...] = ("sqrt",)

    def __post_init__(self):
        if self.distance not in (SQUARED_ERROR, ABSOLUTE_ERROR):
            raise ValueError(f"unknown distance {self.distance!r}")
        for t in self.transforms:
            if t not in ("sqrt", "log", "relative_to_mean"):
                raise ValueError(f"unknown transform {t!r}")

    @classmethod
    def mse(cls):
        return cls(SQUARED_ERROR, ())

    @classmethod
    def rmse(cls):
        return cls(SQUARED_ERROR, ("sqrt",))

    @classmethod
    def rrmse(cls):
        return cls(SQUARED_ERROR, ("sqrt", "relative_to_mean"))

    @classmethod
    def log_mse(cls):
        return cls(SQUARED_ERROR, ("log",))

    @property
    def is_rmse_like(self) -> bool:
        return self.distance == SQUARED_ERROR and self.transforms == ("sqrt",)

    def distances(self, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
        err = pred - target
        return err * err if self.distance == SQUARED_ERROR else np.abs(err)

    def apply(self, mean_distance: np.ndarray, mean_pred: np.ndarray) -> np.ndarray:
        v = np.asarray(mean_distance, dtype=float).copy()
        for t in self.transforms:
            if t == "sqrt":
                v = np.sqrt(v)
            elif t == "log":
                v = np.log(np.maximum(v, 1e-300))
            else:
                v = v / np.abs(mean_pred)
        return v


@dataclass
class UncertaintyEstimate:
    area_ids: tuple
    values: np.ndarray
    method: str
    measure: MeasureSpec
    replicates: int
    seed: int
    interval: tuple[np.ndarray, np.ndarray] | None = None
    n_failed: int = 0
    extras: dict = field(default_factory=dict)


def leading_variance_term(sigma2_gamma, sigma2_eps, n_i) -> np.ndarray:
    """Prediction variance of the best predictor at known parameters."""
    s2e_over_n = np.asarray(sigma2_eps, dtype=float) / np.asarray(n_i, dtype=float)
    num = sigma2_gamma * s2e_over_n
    den = sigma2_gamma + s2e_over_n
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def naive_rmse(dataset: Dataset, fit: FitResult,
               with_interval: bool = True) -> UncertaintyEstimate:
    """Plug-in square root of the leading variance term (no resampling)."""
    values = np.sqrt(leading_variance_term(fit.sigma2_gamma, fit.sigma2_eps,
                                           dataset.n_i))
    interval = None
    if with_interval:
        point = predict.ebp(dataset, fit)
        interval = (point - 2.0 * values, point + 2.0 * values)
    return UncertaintyEstimate(dataset.area_ids, values, NAIVE, MeasureSpec.rmse(),
                               0, 0, interval)


def _warm_state(dataset_m: int, beta0, betas, s2g, s2e, taus, alpha0=None) -> FitResult:
    return FitResult(
        method="init", beta0=float(beta0), betas=np.asarray(betas, dtype=float),
        sigma2_gamma=float(s2g), sigma2_eps=np.asarray(s2e, dtype=float),
        taus=np.asarray(taus, dtype=float), iterations=0, converged=False,
        max_param_delta=float("nan"),
        alpha0=None if alpha0 is None else np.asarray(alpha0, dtype=float),
    )


def _default_refit(psi: PsiSpec, ctl: FitControl, warm_start: bool):
    def refit(ds: Dataset, state: FitResult) -> FitResult:
        return gee.fit(ds, psi, taus=state.taus, ctl=ctl,
                       init=state if warm_start else None)

    return refit


@dataclass
class _BootResult:
    mean_distance: np.ndarray
    mean_pred: np.ndarray
    errors: np.ndarray       # (R_ok, m) prediction minus target per replicate
    n_failed: int


def bootstrap_measure(dataset: Dataset, fit: FitResult,
                      spec: MeasureSpec = MeasureSpec.rmse(), R: int = 100,
                      seed: int = 0, predictor=None, psi: PsiSpec = PsiSpec(),
                      ctl: FitControl = FitControl(), warm_start: bool = True,
                      refit=None, interval_levels=(2.5, 97.5)) -> UncertaintyEstimate:
    """Parametric-bootstrap estimate of the measure for each area.

    Replicate data are generated from the fitted parameters (tilt levels held
    fixed), refit with the same estimating-equation fitter, and the averaged
    distances are transformed per ``spec``. The interval pivots the original
    prediction by the percentiles of the bootstrap prediction errors.
    """
    if R < 2:
        raise ValueError("R must be at least 2")
    predictor = predictor or predict.ebp
    refit = refit or _default_refit(psi, ctl, warm_start)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    z_gamma = rng.standard_normal((R, dataset.m))
    z_eps = rng.standard_normal((R, dataset.n))

    state = fit
    res = _bootstrap_run(dataset, state, spec, z_gamma, z_eps, predictor, refit)
    values = spec.apply(res.mean_distance, res.mean_pred)

    point = predictor(dataset, fit)
    lo_q, hi_q = np.percentile(res.errors, interval_levels, axis=0)
    interval = (point - hi_q, point - lo_q)
    return UncertaintyEstimate(dataset.area_ids, values, BOOTSTRAP, spec, R, seed,
                               interval, res.n_failed)


def _bootstrap_run(dataset: Dataset, state: FitResult, spec: MeasureSpec,
                   z_gamma, z_eps, predictor, refit,
                   max_fail_frac: float = 0.2) -> _BootResult:
    R = z_gamma.shape[0]
    m = dataset.m
    idx = dataset.area_index
    mu = state.beta0 + np.einsum("ij,ij->i", dataset.X, state.betas[idx])
    sd_gamma = np.sqrt(dataset.h * state.sigma2_gamma)
    sd_eps = np.sqrt(dataset.k * state.sigma2_eps[idx])
    synth = state.beta0 + np.einsum("ij,ij->i", dataset.Xbar, state.betas)

    dist = np.zeros((R, m))
    preds = np.zeros((R, m))
    errors = np.zeros((R, m))
    ok = np.zeros(R, dtype=bool)
    for r in range(R):
        gamma = sd_gamma * z_gamma[r]
        y_r = mu + gamma[idx] + sd_eps * z_eps[r]
        target = synth + gamma
        ds_r = dataset.replace_y(y_r)
        try:
            fit_r = refit(ds_r, state)
            pred_r = predictor(ds_r, fit_r)
        except (gee.SingularDesignError, np.linalg.LinAlgError):
            continue
        dist[r] = spec.distances(pred_r, target)
        preds[r] = pred_r
        errors[r] = pred_r - target
        ok[r] = True
    n_failed = int(R - ok.sum())
    if n_failed > max_fail_frac * R:
        raise RuntimeError(f"{n_failed}/{R} bootstrap replicate fits failed")
    used = np.flatnonzero(ok)
    return _BootResult(dist[used].mean(axis=0), preds[used].mean(axis=0),
                       errors[used], n_failed)


def mcjack_combine(a_full: np.ndarray, a_loo: np.ndarray) -> np.ndarray:
    """Jackknife bias correction of bootstrap values.

    ``a_full`` has shape (m,), ``a_loo`` shape (m, m): row l holds the
    bootstrap values evaluated at the delete-area-l parameter set.
    """
    a_full = np.asarray(a_full, dtype=float)
    a_loo = np.asarray(a_loo, dtype=float)
    m = a_loo.shape[0]
    return a_full - (m - 1) / m * np.sum(a_loo - a_full[None, :], axis=0)


def mcjack_measure(dataset: Dataset, fit: FitResult,
                   spec: MeasureSpec = MeasureSpec.rmse(), R: int = 100,
                   seed: int = 0, predictor=None, psi: PsiSpec = PsiSpec(),
                   ctl: FitControl = FitControl(), warm_start: bool = True) -> UncertaintyEstimate:
    """Delete-one-area jackknife correction of the bootstrap measure.

    Every delete-l parameter set re-estimates all areas: the remaining areas
    from the reduced fit, the removed area from its pooled equations on the
    remaining data (its tilt level is kept). All m + 1 bootstrap evaluations
    consume identical noise. Intervals are point +- 2 * value when the
    measure is plain root mean squared error.
    """
    m = dataset.m
    if m < 3:
        raise ValueError("jackknife needs at least 3 areas")
    predictor = predictor or predict.ebp
    refit = _default_refit(psi, ctl, warm_start)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    z_gamma = rng.standard_normal((R, m))
    z_eps = rng.standard_normal((R, dataset.n))

    res_full = _bootstrap_run(dataset, fit, spec, z_gamma, z_eps, predictor, refit)
    a_full = spec.apply(res_full.mean_distance, res_full.mean_pred)

    alpha0 = fit.alpha0 if fit.alpha0 is not None else np.full(m, fit.beta0)
    a_loo = np.empty((m, m))
    for l in range(m):
        ds_l = dataset.drop_area(l)
        keep = np.arange(m) != l
        warm = _warm_state(m - 1, fit.beta0, fit.betas[keep], fit.sigma2_gamma,
                           fit.sigma2_eps[keep], fit.taus[keep], alpha0[keep])
        try:
            fit_l = gee.fit(ds_l, psi, taus=fit.taus[keep], ctl=ctl, init=warm)
            coef_init = np.concatenate([[alpha0[l]], fit.betas[l]])
            a0_l, beta_l, s2e_l = gee.fit_virtual_area(
                ds_l, float(fit.taus[l]), psi, fit_l,
                float(fit.sigma2_eps[l]), coef_init, ctl)
        except (gee.SingularDesignError, np.linalg.LinAlgError) as exc:
            raise RuntimeError(
                f"leave-one-out fit failed for area {dataset.area_ids[l]!r}: {exc}"
            ) from exc
        betas_l = fit.betas.copy()
        betas_l[keep] = fit_l.betas
        betas_l[l] = beta_l
        s2e_full = fit.sigma2_eps.copy()
        s2e_full[keep] = fit_l.sigma2_eps
        s2e_full[l] = s2e_l
        alpha_full = alpha0.copy()
        alpha_full[keep] = fit_l.alpha0
        alpha_full[l] = a0_l
        state_l = _warm_state(m, fit_l.beta0, betas_l, fit_l.sigma2_gamma,
                              s2e_full, fit.taus, alpha_full)
        res_l = _bootstrap_run(dataset, state_l, spec, z_gamma, z_eps, predictor,
                               refit)
        a_loo[l] = spec.apply(res_l.mean_distance, res_l.mean_pred)

    values = mcjack_combine(a_full, a_loo)
    interval = None
    if spec.is_rmse_like:
        point = predictor(dataset, fit)
        half = 2.0 * np.maximum(values, 0.0)
        interval = (point - half, point + half)
    return UncertaintyEstimate(dataset.area_ids, values, MCJACK, spec, R, seed,
                               interval, res_full.n_failed,
                               extras={"bootstrap_values": a_full,
                                       "loo_values": a_loo})
