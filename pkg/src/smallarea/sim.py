"""Monte Carlo harnesses: scenario generators, replicate drivers, metrics.

Model-based runs regenerate a synthetic population every replicate, draw a
without-replacement sample per area, fit every requested predictor, and
accumulate relative bias / relative RMSE / efficiency across replicates.
Design-based runs hold a fixed population (typically read from a CSV) and
vary only the sampling. All randomness derives from (seed, replicate), so
results are identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import gee, mle, predict, uncertainty
from .gee import FitControl
from .influence import PsiSpec
from .model import Dataset
from .mquantile import TauGrid, estimate_taus

S00 = "s00"
SBETA0 = "sbeta0"
SBETASIGMA = "sbetasigma"
OUTLIER = "outlier"

_KINDS = (S00, SBETA0, SBETASIGMA, OUTLIER)

# stream ids for per-replicate seed derivation
_POP_STREAM, _SAMPLE_STREAM, _BOOT_STREAM = 1, 2, 3


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str
    m: int = 100
    N: int = 100
    n: int = 4
    T: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown scenario {self.kind!r}; expected one of {_KINDS}")
        if self.n > self.N:
            raise ValueError("sample size n cannot exceed population size N")
        if self.T < 1 or self.m < 2:
            raise ValueError("need T >= 1 and m >= 2")


def scenario_slopes(kind: str, m: int) -> np.ndarray:
    """True slopes: common 5 in the base scenario, +-5 by half otherwise."""
    if kind == S00:
        return np.full(m, 5.0)
    return np.where(np.arange(m) < (m + 1) // 2, 5.0, -5.0)


def _rng_for(cfg: ScenarioConfig, stream: int, replicate: int):
    return np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(stream, replicate))
    )


def _generate(cfg: ScenarioConfig, replicate: int):
    """Population dataset plus generation truths for one replicate."""
    rng = _rng_for(cfg, _POP_STREAM, replicate)
    m, N = cfg.m, cfg.N
    total = m * N
    x = rng.lognormal(mean=1.0, sigma=0.5, size=total)
    area = np.repeat(np.arange(m), N)
    gamma = rng.normal(0.0, np.sqrt(3.0), size=m)
    slopes = scenario_slopes(cfg.kind, m)

    if cfg.kind == SBETASIGMA:
        s2e = np.empty(m)
        s2e[: (m + 1) // 2] = rng.normal(6.0, np.sqrt(2.0), size=(m + 1) // 2)
        s2e[(m + 1) // 2:] = rng.normal(12.0, np.sqrt(2.0), size=m - (m + 1) // 2)
        s2e = np.maximum(s2e, 0.5)
        eps = rng.normal(0.0, 1.0, size=total) * np.sqrt(s2e[area])
    elif cfg.kind == OUTLIER:
        s2e = np.full(m, 6.0)
        good = rng.random(total) < 0.97
        eps_good = rng.normal(0.0, np.sqrt(6.0), size=total)
        eps_bad = rng.normal(20.0, np.sqrt(150.0), size=total)
        eps = np.where(good, eps_good, eps_bad)
    else:
        s2e = np.full(m, 6.0)
        eps = rng.normal(0.0, np.sqrt(6.0), size=total)

    y = 10.0 + slopes[area] * x + gamma[area] + eps
    pop = Dataset.from_arrays(area, y, x)
    info = {
        "slopes": slopes,
        "sigma2_eps": s2e,
        "gamma": gamma,
        "area_means": pop.area_means()[0],
    }
    return pop, info


def generate_population(cfg: ScenarioConfig, replicate: int) -> Dataset:
    """Deterministic synthetic population for one replicate."""
    return _generate(cfg, replicate)[0]


def draw_srswor(population: Dataset, n_per_area, rng) -> Dataset:
    """Sample without replacement within every area; keeps population summaries."""
    n_req = np.broadcast_to(np.asarray(n_per_area, dtype=np.int64), (population.m,))
    rows = []
    for i in range(population.m):
        s0, s1 = population.starts[i], population.starts[i + 1]
        size = min(int(n_req[i]), s1 - s0)
        rows.append(s0 + rng.choice(s1 - s0, size=size, replace=False))
    sel = np.concatenate(rows)
    area_labels = [population.area_ids[j] for j in population.area_index[sel]]
    return Dataset.from_arrays(
        area_labels,
        population.y[sel],
        population.X[sel],
        k=population.k[sel],
        N=population.n_i.copy(),
        Xbar=population.Xbar.copy(),
        h=population.h.copy(),
        area_ids=population.area_ids,
    )


@dataclass(frozen=True)
class SimOptions:
    """What to compute per replicate and with which fitter settings."""

    predictors: tuple[str, ...] = ("direct", "eblup", "ebp", "ebp_mle", "mq")
    rmse_methods: tuple[str, ...] = ()
    R: int = 100
    psi_base: str = "huber"
    c: float = 1.345
    tau_mode: str = "elb"          # "elb" or "fixed"
    tau_fixed: float = 0.5
    grid_lo: float = 0.30
    grid_hi: float = 0.70
    grid_step: float = 0.02
    tol: float = 1e-6
    max_iter: int = 200
    collect_variance_ratios: bool = False
    mcjack_cap_m: int = 12         # refuse jackknife inside sims above this m

    @property
    def psi(self) -> PsiSpec:
        return PsiSpec(self.psi_base, self.c, 0.5)

    @property
    def ctl(self) -> FitControl:
        return FitControl(tol=self.tol, max_iter=self.max_iter)

    @property
    def grid(self) -> TauGrid:
        return TauGrid.from_spec(self.grid_lo, self.grid_hi, self.grid_step)


def _fit_pipeline(sample: Dataset, opts: SimOptions):
    """Shared per-sample fitting: tilt estimation, robust fit, homogeneous fit."""
    bhf = mle.fit_bhf_reml(sample)
    if opts.tau_mode == "elb":
        tau_est = estimate_taus(sample, opts.grid, opts.c)
        taus = tau_est.elb_tau
    else:
        tau_est = None
        taus = np.full(sample.m, opts.tau_fixed)
    fit = gee.fit(sample, opts.psi, taus=taus, ctl=opts.ctl)
    return bhf, tau_est, fit


def _predict_one(sample: Dataset, opts: SimOptions, bhf, tau_est, fit,
                 mle_fit) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    names = opts.predictors
    if "direct" in names:
        out["direct"] = predict.direct(sample)
    if "eblup" in names:
        out["eblup"] = predict.eblup_bhf(sample, bhf)
    if "ebp" in names:
        out["ebp"] = predict.ebp(sample, fit)
    if "ebp_finite" in names:
        out["ebp_finite"] = predict.ebp_finite(sample, fit)
    if "ebp_mle" in names:
        out["ebp_mle"] = predict.ebp(sample, mle_fit)
    if "mq" in names or "mqcd" in names:
        area_taus = tau_est.elb_tau if tau_est is not None else np.full(sample.m, 0.5)
        from .mquantile import fit_mquantile

        cache = {float(t): fit_mquantile(sample, float(t), opts.c)
                 for t in np.unique(area_taus)}
        if "mq" in names:
            out["mq"] = predict.mq_synthetic(sample, area_taus, opts.c, coef_by_tau=cache)
        if "mqcd" in names:
            betas = np.stack([cache[float(t)][1:] for t in area_taus])
            out["mqcd"] = predict.mqcd(sample, betas)
    return out


def _replicate_model_based(cfg: ScenarioConfig, t: int, opts: SimOptions):
    pop, info = _generate(cfg, t)
    rng = _rng_for(cfg, _SAMPLE_STREAM, t)
    sample = draw_srswor(pop, cfg.n, rng)
    bhf, tau_est, fit = _fit_pipeline(sample, opts)
    mle_fit = None
    if "ebp_mle" in opts.predictors or opts.collect_variance_ratios:
        mle_fit = mle.fit_mle(sample)
    preds = _predict_one(sample, opts, bhf, tau_est, fit, mle_fit)

    res = {"truth": info["area_means"], "preds": preds}
    if opts.collect_variance_ratios:
        res["var_ratio_gee"] = fit.sigma2_eps / info["sigma2_eps"]
        res["var_ratio_mle"] = mle_fit.sigma2_eps / info["sigma2_eps"]

    if opts.rmse_methods:
        boot_seed = int(np.random.SeedSequence(
            cfg.seed, spawn_key=(_BOOT_STREAM, t)).generate_state(1)[0])
        est: dict[str, tuple] = {}
        for method in opts.rmse_methods:
            if method == uncertainty.NAIVE:
                ue = uncertainty.naive_rmse(sample, fit)
            elif method == uncertainty.BOOTSTRAP:
                ue = uncertainty.bootstrap_measure(
                    sample, fit, uncertainty.MeasureSpec.rmse(), R=opts.R,
                    seed=boot_seed, psi=opts.psi, ctl=opts.ctl)
            elif method == uncertainty.MCJACK:
                if sample.m > opts.mcjack_cap_m:
                    raise ValueError(
                        f"jackknife inside the harness is capped at m={opts.mcjack_cap_m}")
                ue = uncertainty.mcjack_measure(
                    sample, fit, uncertainty.MeasureSpec.rmse(), R=opts.R,
                    seed=boot_seed, psi=opts.psi, ctl=opts.ctl)
            else:
                raise ValueError(f"unknown rmse method {method!r}")
            est[method] = (ue.values, ue.interval)
        res["rmse"] = est
    return res


@dataclass
class MetricsTable:
    """Medians over areas of the replication metrics, plus per-area detail."""

    predictor_names: tuple[str, ...]
    median_arb_pct: dict[str, float]
    median_rrmse_pct: dict[str, float]
    median_eff: dict[str, float]
    per_area: dict[str, dict[str, np.ndarray]]
    rmse_names: tuple[str, ...] = ()
    rmse_median_rb_pct: dict[str, float] = field(default_factory=dict)
    rmse_median_rrmse_pct: dict[str, float] = field(default_factory=dict)
    rmse_median_coverage_pct: dict[str, float] = field(default_factory=dict)
    rmse_per_area: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    n_replicates_used: int = 0
    n_replicates_failed: int = 0
    extras: dict = field(default_factory=dict)


def predictor_metrics(preds: np.ndarray, truths: np.ndarray):
    """Per-area ARB, RRMSE and RMSE from (T, m) prediction/truth stacks."""
    diff = preds - truths
    mean_truth = truths.mean(axis=0)
    arb = np.abs(diff.mean(axis=0)) / np.abs(mean_truth)
    rmse = np.sqrt((diff**2).mean(axis=0))
    rrmse = rmse / np.abs(mean_truth)
    return {"arb": arb, "rrmse": rrmse, "rmse": rmse}


def rmse_estimator_metrics(estimates: np.ndarray, emp_rmse: np.ndarray,
                           hits: np.ndarray | None):
    """Per-area relative bias / relative RMSE of an RMSE estimator, plus coverage."""
    rb = (estimates.mean(axis=0) - emp_rmse) / emp_rmse
    rrmse = np.sqrt(((estimates - emp_rmse) ** 2).mean(axis=0)) / emp_rmse
    out = {"rb": rb, "rrmse": rrmse}
    if hits is not None:
        out["coverage"] = hits.mean(axis=0)
    return out


def _summarize(results: list, cfg: ScenarioConfig, opts: SimOptions,
               n_failed: int) -> MetricsTable:
    used = len(results)
    truths = np.stack([r["truth"] for r in results])
    names = [p for p in opts.predictors if p in results[0]["preds"]]
    stacks = {p: np.stack([r["preds"][p] for r in results]) for p in names}
    per_area = {p: predictor_metrics(stacks[p], truths) for p in names}
    ref = per_area["eblup"]["rmse"] if "eblup" in per_area else None

    median_arb, median_rrmse, median_eff = {}, {}, {}
    for p in names:
        median_arb[p] = float(np.median(per_area[p]["arb"]) * 100.0)
        median_rrmse[p] = float(np.median(per_area[p]["rrmse"]) * 100.0)
        if ref is not None:
            eff = per_area[p]["rmse"] / ref
            per_area[p]["eff"] = eff
            median_eff[p] = float(np.median(eff))

    table = MetricsTable(
        predictor_names=tuple(names),
        median_arb_pct=median_arb,
        median_rrmse_pct=median_rrmse,
        median_eff=median_eff,
        per_area=per_area,
        n_replicates_used=used,
        n_replicates_failed=n_failed,
    )

    if opts.rmse_methods and "ebp" in stacks:
        emp = predictor_metrics(stacks["ebp"], truths)["rmse"]
        rnames = []
        for method in opts.rmse_methods:
            vals = np.stack([r["rmse"][method][0] for r in results])
            hit = None
            if results[0]["rmse"][method][1] is not None:
                los = np.stack([r["rmse"][method][1][0] for r in results])
                his = np.stack([r["rmse"][method][1][1] for r in results])
                hit = ((los <= truths) & (truths <= his)).astype(float)
            mm = rmse_estimator_metrics(vals, emp, hit)
            table.rmse_per_area[method] = mm
            table.rmse_median_rb_pct[method] = float(np.median(mm["rb"]) * 100.0)
            table.rmse_median_rrmse_pct[method] = float(np.median(mm["rrmse"]) * 100.0)
            if hit is not None:
                table.rmse_median_coverage_pct[method] = float(
                    np.median(mm["coverage"]) * 100.0)
            rnames.append(method)
        table.rmse_names = tuple(rnames)
    return table


def _model_task(args):
    cfg, t, opts = args
    try:
        return t, _replicate_model_based(cfg, t, opts)
    except (gee.SingularDesignError, np.linalg.LinAlgError, RuntimeError) as exc:
        return t, {"error": str(exc)}


def run_model_based(cfg: ScenarioConfig, opts: SimOptions = SimOptions(),
                    workers: int = 1) -> MetricsTable:
    """Scenario study: T replicates of generate / sample / fit / predict."""
    tasks = [(cfg, t, opts) for t in range(cfg.T)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(_model_task, tasks, chunksize=4))
    else:
        raw = [_model_task(a) for a in tasks]
    raw.sort(key=lambda pair: pair[0])
    results = [r for _, r in raw if "error" not in r]
    n_failed = cfg.T - len(results)
    if not results:
        raise RuntimeError("every replicate failed")
    table = _summarize(results, cfg, opts, n_failed)
    if opts.collect_variance_ratios:
        table.extras["var_ratio_gee"] = np.stack(
            [r["var_ratio_gee"] for r in results]).mean(axis=0)
        table.extras["var_ratio_mle"] = np.stack(
            [r["var_ratio_mle"] for r in results]).mean(axis=0)
    return table


def _design_task(args):
    population, n, t, seed, opts = args
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(n, t)))
    try:
        sample = draw_srswor(population, n, rng)
        bhf, tau_est, fit = _fit_pipeline(sample, opts)
        mle_fit = mle.fit_mle(sample) if "ebp_mle" in opts.predictors else None
        preds = _predict_one(sample, opts, bhf, tau_est, fit, mle_fit)
        return (n, t), preds
    except (gee.SingularDesignError, np.linalg.LinAlgError, RuntimeError) as exc:
        return (n, t), {"error": str(exc)}


@dataclass
class DesignMetrics:
    """Design-based summary for one per-area sample size."""

    n: int
    median_abs_rb_pct: dict[str, float]
    median_rrmse_pct: dict[str, float]
    per_area_rb: dict[str, np.ndarray]
    per_area_rrmse: dict[str, np.ndarray]
    smallest_area_rb_pct: dict[str, float]
    smallest_area_rrmse_pct: dict[str, float]
    n_replicates_used: int
    n_replicates_failed: int


def run_design_based(population: Dataset, n_grid, T: int,
                     opts: SimOptions = SimOptions(
                         predictors=("direct", "eblup", "ebp", "ebp_finite",
                                     "mq", "mqcd")),
                     seed: int = 0, workers: int = 1) -> list[DesignMetrics]:
    """Fixed-population study over a grid of per-area sample sizes.

    The population dataset is held fixed (its area means are the truth);
    every (n, replicate) pair draws an independent within-area sample.
    ``smallest_area_*`` traces the area with the smallest population size.
    """
    truths = population.area_means()[0]
    small_idx = int(np.argmin(population.n_i))
    tasks = [(population, int(n), t, seed, opts) for n in n_grid for t in range(T)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(_design_task, tasks, chunksize=2))
    else:
        raw = [_design_task(a) for a in tasks]
    by_n: dict[int, list] = {int(n): [] for n in n_grid}
    failed: dict[int, int] = {int(n): 0 for n in n_grid}
    for (n, t), preds in raw:
        if "error" in preds:
            failed[n] += 1
        else:
            by_n[n].append((t, preds))
    out = []
    for n in n_grid:
        n = int(n)
        entries = sorted(by_n[n], key=lambda pair: pair[0])
        if not entries:
            raise RuntimeError(f"every replicate failed at n={n}")
        names = list(entries[0][1].keys())
        med_rb, med_rrmse, rb_area, rrmse_area = {}, {}, {}, {}
        small_rb, small_rrmse = {}, {}
        for p in names:
            stack = np.stack([e[1][p] for e in entries])
            rb = (stack.mean(axis=0) - truths) / np.abs(truths)
            rrmse = np.sqrt(((stack - truths) ** 2).mean(axis=0)) / np.abs(truths)
            rb_area[p] = rb
            rrmse_area[p] = rrmse
            med_rb[p] = float(np.median(np.abs(rb)) * 100.0)
            med_rrmse[p] = float(np.median(rrmse) * 100.0)
            small_rb[p] = float(rb[small_idx] * 100.0)
            small_rrmse[p] = float(rrmse[small_idx] * 100.0)
        out.append(DesignMetrics(
            n=n,
            median_abs_rb_pct=med_rb,
            median_rrmse_pct=med_rrmse,
            per_area_rb=rb_area,
            per_area_rrmse=rrmse_area,
            smallest_area_rb_pct=small_rb,
            smallest_area_rrmse_pct=small_rrmse,
            n_replicates_used=len(entries),
            n_replicates_failed=failed[n],
        ))
    return out
