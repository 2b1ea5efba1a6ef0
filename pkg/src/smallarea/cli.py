"""Command-line interface.

Five subcommands: ``fit`` (robust area-specific parameter estimation),
``predict`` (all point predictors), ``uncertainty`` (naive, bootstrap, or
jackknife measures), ``simulate`` (model-based scenario or fixed-population
design studies), and ``diagnose`` (agreement and precision diagnostics).
Every command writes tidy CSV output plus a JSON manifest capturing the
configuration and seed, so runs replay exactly.

Exit codes: 0 success, 1 usage error, 2 data validation error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, backend, diagnostics, gee, mle, predict, sim, uncertainty
from .gee import FitControl, SingularDesignError
from .influence import PsiSpec
from .io import (ParseError, ValidationError, read_population_csv, read_unit_csv,
                 write_manifest, write_table)
from .mquantile import TauGrid, estimate_taus

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit2(f"{self.prog}: error: {message}")


class SystemExit2(Exception):
    """Usage error carrying the message; mapped to exit code 1."""


def _parse_tau(text: str):
    if text == "elb":
        return ("elb", None)
    if text.startswith("fixed:"):
        try:
            value = float(text.split(":", 1)[1])
        except ValueError:
            raise SystemExit2(f"invalid --tau value {text!r}") from None
        if not 0.0 < value < 1.0:
            raise SystemExit2("--tau fixed value must lie in (0, 1)")
        return ("fixed", value)
    raise SystemExit2(f"--tau expects 'elb' or 'fixed:<v>', got {text!r}")


def _parse_grid(text: str) -> TauGrid:
    try:
        lo, hi, step = (float(part) for part in text.split(":"))
        return TauGrid.from_spec(lo, hi, step)
    except (ValueError, TypeError) as exc:
        raise SystemExit2(f"invalid --grid {text!r}: {exc}") from None


def _measure(text: str) -> uncertainty.MeasureSpec:
    table = {
        "rmse": uncertainty.MeasureSpec.rmse,
        "rrmse": uncertainty.MeasureSpec.rrmse,
        "mse": uncertainty.MeasureSpec.mse,
        "log-mse": uncertainty.MeasureSpec.log_mse,
    }
    return table[text]()


def _add_common(p):
    p.add_argument("--psi", choices=["huber", "identity", "sign"], default="huber")
    p.add_argument("--c", type=float, default=1.345, help="Huber tuning constant")
    p.add_argument("--tau", default="elb", help="'elb' or 'fixed:<v>' (default elb)")
    p.add_argument("--grid", default="0.30:0.70:0.02",
                   help="tilt grid as min:max:step")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")


def build_parser() -> _Parser:
    parser = _Parser(prog="smallarea",
                     description="Small-area estimation with area-specific slopes "
                                 "and sampling variances")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the robust area-specific model")
    p.add_argument("--units", required=True)
    p.add_argument("--areas")
    _add_common(p)

    p = sub.add_parser("predict", help="compute every point predictor")
    p.add_argument("--units", required=True)
    p.add_argument("--areas")
    _add_common(p)

    p = sub.add_parser("uncertainty", help="uncertainty measure for the model predictor")
    p.add_argument("--units", required=True)
    p.add_argument("--areas")
    p.add_argument("--measure", choices=["rmse", "rrmse", "mse", "log-mse"],
                   default="rmse")
    p.add_argument("--method", choices=["naive", "bootstrap", "mcjack"],
                   default="bootstrap")
    p.add_argument("--R", type=int, default=100, help="bootstrap replicates")
    _add_common(p)

    p = sub.add_parser("simulate", help="Monte Carlo study (scenario or population file)")
    p.add_argument("--scenario", choices=[sim.S00, sim.SBETA0, sim.SBETASIGMA,
                                          sim.OUTLIER])
    p.add_argument("--population", help="fixed population CSV for design-based runs")
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--N", type=int, default=100)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--n-grid", default=None,
                   help="comma list of per-area sizes for design-based runs")
    p.add_argument("--T", type=int, default=200)
    p.add_argument("--R", type=int, default=100)
    p.add_argument("--method", action="append", default=None, dest="methods",
                   choices=["naive", "bootstrap", "mcjack"],
                   help="also evaluate this RMSE estimator (repeatable)")
    p.add_argument("--predictors", default=None,
                   help="comma list among direct,eblup,ebp,ebp_mle,ebp_finite,mq,mqcd")
    p.add_argument("--workers", type=int, default=1)
    _add_common(p)

    p = sub.add_parser("diagnose", help="agreement and precision diagnostics")
    p.add_argument("--units", required=True)
    p.add_argument("--areas")
    p.add_argument("--method", choices=["naive", "bootstrap"], default="bootstrap")
    p.add_argument("--R", type=int, default=100)
    _add_common(p)
    return parser


def _pipeline(args):
    mode, fixed = _parse_tau(args.tau)
    grid = _parse_grid(args.grid)
    psi = PsiSpec(args.psi, args.c, 0.5)
    ctl = FitControl(tol=args.tol, max_iter=args.max_iter)
    dataset = read_unit_csv(args.units, getattr(args, "areas", None))
    if mode == "elb":
        tau_est = estimate_taus(dataset, grid, args.c)
        taus = tau_est.elb_tau
    else:
        tau_est = None
        taus = np.full(dataset.m, fixed)
    fit = gee.fit(dataset, psi, taus=taus, ctl=ctl)
    return dataset, psi, ctl, grid, tau_est, fit


def _manifest_payload(args) -> dict:
    skip = {"out"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def cmd_fit(args) -> int:
    dataset, psi, ctl, grid, tau_est, fit = _pipeline(args)
    header = (["area_id", "n", "N", "beta0"]
              + [f"beta{j+1}" for j in range(dataset.p)]
              + ["sigma2_gamma", "sigma2_eps", "tau", "alpha0"])
    rows = []
    for i in range(dataset.m):
        rows.append([dataset.area_ids[i], dataset.n_i[i], dataset.N[i], fit.beta0,
                     *fit.betas[i], fit.sigma2_gamma, fit.sigma2_eps[i],
                     fit.taus[i], fit.alpha0[i]])
    write_table(args.out, header, rows)
    payload = _manifest_payload(args)
    payload.update(converged=fit.converged, iterations=fit.iterations,
                   max_param_delta=fit.max_param_delta, warnings=fit.warnings,
                   backend=backend.active_name())
    write_manifest(Path(args.out).with_suffix(".manifest.json"), payload)
    if not fit.converged:
        print("warning: fit did not converge "
              f"(last change {fit.max_param_delta:.3g})", file=sys.stderr)
    print(f"wrote {args.out} ({dataset.m} areas, converged={fit.converged})")
    return EXIT_OK


def cmd_predict(args) -> int:
    dataset, psi, ctl, grid, tau_est, fit = _pipeline(args)
    bhf = mle.fit_bhf_reml(dataset)
    mle_fit = None
    try:
        mle_fit = mle.fit_mle(dataset, FitControl(tol=1e-8, max_iter=500))
    except ValueError:
        pass  # non-unit multipliers or single-unit areas
    ps = predict.compute_all(dataset, fit, bhf, tau_est, psi, mle_fit)
    header = ["area_id", "n", "N", "direct", "eblup_bhf", "ebp", "ebp_mle",
              "ebp_finite", "mq_synth", "mqcd", "shrinkage_model", "shrinkage_bhf"]
    rows = []
    for i in range(dataset.m):
        rows.append([
            dataset.area_ids[i], dataset.n_i[i], dataset.N[i], ps.direct[i],
            ps.eblup_bhf[i], ps.ebp[i],
            ps.ebp_mle[i] if ps.ebp_mle is not None else float("nan"),
            ps.ebp_finite[i], ps.mq_synth[i], ps.mqcd[i],
            ps.shrinkage_model[i], ps.shrinkage_bhf[i],
        ])
    write_table(args.out, header, rows)
    write_manifest(Path(args.out).with_suffix(".manifest.json"),
                   _manifest_payload(args))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_uncertainty(args) -> int:
    dataset, psi, ctl, grid, tau_est, fit = _pipeline(args)
    spec = _measure(args.measure)
    if args.method == "naive":
        if args.measure != "rmse":
            raise SystemExit2("the naive method supports only --measure rmse")
        est = uncertainty.naive_rmse(dataset, fit)
    elif args.method == "bootstrap":
        est = uncertainty.bootstrap_measure(dataset, fit, spec, R=args.R,
                                            seed=args.seed, psi=psi, ctl=ctl)
    else:
        est = uncertainty.mcjack_measure(dataset, fit, spec, R=args.R,
                                         seed=args.seed, psi=psi, ctl=ctl)
    point = predict.ebp(dataset, fit)
    header = ["area_id", "estimate", "value", "method", "measure", "lo", "hi"]
    rows = []
    for i in range(dataset.m):
        lo, hi = (est.interval[0][i], est.interval[1][i]) if est.interval else ("", "")
        rows.append([dataset.area_ids[i], point[i], est.values[i], est.method,
                     args.measure, lo, hi])
    write_table(args.out, header, rows)
    payload = _manifest_payload(args)
    payload.update(n_failed=est.n_failed, backend=backend.active_name())
    write_manifest(Path(args.out).with_suffix(".manifest.json"), payload)
    print(f"wrote {args.out}")
    return EXIT_OK


def _sim_opts(args) -> sim.SimOptions:
    grid = _parse_grid(args.grid)
    mode, fixed = _parse_tau(args.tau)
    predictors = ("direct", "eblup", "ebp", "ebp_mle", "mq")
    if args.predictors:
        predictors = tuple(p.strip() for p in args.predictors.split(",") if p.strip())
    return sim.SimOptions(
        predictors=predictors,
        rmse_methods=tuple(args.methods or ()),
        R=args.R,
        psi_base=args.psi,
        c=args.c,
        tau_mode=mode,
        tau_fixed=fixed if fixed is not None else 0.5,
        grid_lo=grid.values[0],
        grid_hi=grid.values[-1],
        grid_step=round(grid.values[1] - grid.values[0], 10) if len(grid.values) > 1 else 0.02,
        tol=args.tol,
        max_iter=args.max_iter,
    )


def cmd_simulate(args) -> int:
    if (args.scenario is None) == (args.population is None):
        raise SystemExit2("pass exactly one of --scenario or --population")
    opts = _sim_opts(args)
    out = Path(args.out)
    if args.scenario:
        cfg = sim.ScenarioConfig(kind=args.scenario, m=args.m, N=args.N, n=args.n,
                                 T=args.T, seed=args.seed)
        table = sim.run_model_based(cfg, opts, workers=args.workers)
        rows = [[name, table.median_arb_pct[name], table.median_rrmse_pct[name],
                 table.median_eff.get(name, float("nan"))]
                for name in table.predictor_names]
        write_table(out, ["predictor", "median_arb_pct", "median_rrmse_pct",
                          "median_eff"], rows)
        if table.rmse_names:
            rrows = [[name, table.rmse_median_rb_pct[name],
                      table.rmse_median_rrmse_pct[name],
                      table.rmse_median_coverage_pct.get(name, float("nan"))]
                     for name in table.rmse_names]
            write_table(out.with_name(out.stem + "_rmse" + out.suffix),
                        ["estimator", "median_rb_pct", "median_rrmse_pct",
                         "median_coverage_pct"], rrows)
        payload = _manifest_payload(args)
        payload.update(n_replicates_used=table.n_replicates_used,
                       n_replicates_failed=table.n_replicates_failed,
                       backend=backend.active_name())
        write_manifest(out.with_suffix(".manifest.json"), payload)
        print(f"wrote {out} ({table.n_replicates_used} replicates used, "
              f"{table.n_replicates_failed} failed)")
    else:
        population = read_population_csv(args.population)
        if args.n_grid:
            n_grid = [int(v) for v in args.n_grid.split(",")]
        else:
            n_grid = [args.n]
        metrics = sim.run_design_based(population, n_grid, args.T, opts,
                                       seed=args.seed, workers=args.workers)
        rows = []
        for dm in metrics:
            for name in dm.median_abs_rb_pct:
                rows.append([dm.n, name, dm.median_abs_rb_pct[name],
                             dm.median_rrmse_pct[name],
                             dm.smallest_area_rb_pct[name],
                             dm.smallest_area_rrmse_pct[name]])
        write_table(out, ["n", "predictor", "median_abs_rb_pct", "median_rrmse_pct",
                          "smallest_area_rb_pct", "smallest_area_rrmse_pct"], rows)
        write_manifest(out.with_suffix(".manifest.json"), _manifest_payload(args))
        print(f"wrote {out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    dataset, psi, ctl, grid, tau_est, fit = _pipeline(args)
    point = predict.ebp(dataset, fit)
    dvar = diagnostics.direct_variances(dataset)
    dmean = predict.direct(dataset)
    if args.method == "naive":
        est = uncertainty.naive_rmse(dataset, fit, with_interval=False)
    else:
        est = uncertainty.bootstrap_measure(dataset, fit, R=args.R,
                                            seed=args.seed, psi=psi, ctl=ctl)
    gof = diagnostics.wald_gof(dmean, point, dvar, est.values**2,
                               dataset.area_ids)
    cv = diagnostics.cv_ratio(dmean, dvar, point, est.values, dataset.area_ids)
    header = ["area_id", "direct", "model", "var_direct", "rmse_model", "cv_ratio"]
    rows = [[dataset.area_ids[i], dmean[i], point[i], dvar[i], est.values[i],
             cv.per_area[i]] for i in range(dataset.m)]
    write_table(args.out, header, rows)
    payload = _manifest_payload(args)
    payload.update(
        wald_statistic=gof.statistic, df=gof.df, critical_95=gof.critical_95,
        consistent_with_direct=gof.consistent_with_direct,
        excluded_areas=list(gof.excluded_areas), mean_cv_ratio=cv.mean_ratio,
    )
    write_manifest(Path(args.out).with_suffix(".manifest.json"), payload)
    verdict = ("not statistically different from the direct estimates"
               if gof.consistent_with_direct else
               "statistically different from the direct estimates")
    print(f"agreement statistic {gof.statistic:.4g} on {gof.df} df "
          f"(95% bound {gof.critical_95:.4f}): {verdict}")
    print(f"mean CV ratio (direct / model): {cv.mean_ratio:.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


_COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "uncertainty": cmd_uncertainty,
    "simulate": cmd_simulate,
    "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit2 as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SingularDesignError, np.linalg.LinAlgError, RuntimeError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
