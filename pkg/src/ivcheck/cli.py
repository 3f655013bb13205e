"""Command-line interface.

Exit codes: 0 success (including a test that fails to reject), 2 when the
`test` subcommand rejects its null hypothesis, 1 on any error.
"""

from __future__ import annotations

import argparse
import csv
from dataclasses import replace
import json
import sys
import time

import numpy as np

from . import __version__
from .clrtest import TestConfig, identified_set, test_model
from .data import CONFIG_KEYS, RngSpec, load_csv, parse_config
from .errors import IvcheckError
from .estimators import fit_boxcox, fit_gmm2step, fit_iv, fit_ols, polynomial_instruments
from .moments import Assumption, Conditioning, ModelForm, ModelSpec
from .mte import (
    condition1_diagnostic,
    estimate_asf,
    estimate_mte,
    fit_control_function,
    fit_propensity,
    uniformity_diagnostic,
)
from .overid import hansen_j, sargan
from .simulate import DgpFamily, DgpSpec, Method, run_study

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_REJECT = 2

_CONFIG_HELP = "config file with `key = value` lines; keys: " + ", ".join(sorted(CONFIG_KEYS))


def _add_data_args(p):
    p.add_argument("data", help="input CSV file")
    p.add_argument("--y-col", default="y", help="outcome column (default: y)")
    p.add_argument("--x-cols", default="x", help="comma-separated regressor columns (default: x)")
    p.add_argument("--z-cols", default=None,
                   help="comma-separated instrument columns (default: same as --x-cols)")


def _add_common_args(p):
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default: 0)")
    p.add_argument("--config", default=None, help=_CONFIG_HELP)
    p.add_argument("--out", default=None, help="write results as CSV to this path")
    p.add_argument("--manifest", default=None, help="write a JSON run manifest to this path")


def _load(args):
    x_cols = [c.strip() for c in args.x_cols.split(",")]
    z_cols = [c.strip() for c in args.z_cols.split(",")] if args.z_cols else list(x_cols)
    return load_csv(args.data, args.y_col, x_cols, z_cols)


def _test_config(args, config: dict) -> TestConfig:
    kwargs = {}
    if "grid.count" in config:
        kwargs["grid_count"] = config["grid.count"]
    if "grid.centile_lo" in config:
        kwargs["centile_lo"] = config["grid.centile_lo"]
    if "grid.centile_hi" in config:
        kwargs["centile_hi"] = config["grid.centile_hi"]
    if "test.alpha_levels" in config:
        kwargs["alpha_levels"] = tuple(
            float(a) for a in config["test.alpha_levels"].split(",")
        )
    if "npreg.method" in config:
        kwargs["method"] = config["npreg.method"]
    if "npreg.series_order" in config:
        kwargs["series_order"] = config["npreg.series_order"]
    if "npreg.bandwidth" in config:
        kwargs["bandwidth"] = config["npreg.bandwidth"]
    if "npreg.bandwidth_scale" in config:
        kwargs["bandwidth_scale"] = config["npreg.bandwidth_scale"]
    if "sim.multiplier_draws" in config:
        kwargs["mult_draws"] = config["sim.multiplier_draws"]
    if getattr(args, "method", None):
        kwargs["method"] = args.method
    return TestConfig(**kwargs)


def _model_spec(args) -> ModelSpec:
    assumptions = {Assumption.EXOGENEITY}
    if getattr(args, "homoskedastic", False):
        assumptions.add(Assumption.HOMOSKEDASTICITY)
    return ModelSpec(
        form=ModelForm.BOXCOX if args.form == "boxcox" else ModelForm.LINEAR,
        conditioning=Conditioning.ON_Z if args.conditioning == "z" else Conditioning.ON_X,
        assumptions=frozenset(assumptions),
    )


def _write_csv(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _write_manifest(path, args, extra=None):
    manifest = {
        "tool": "ivcheck",
        "version": __version__,
        "command": sys.argv[1:],
        "seed": getattr(args, "seed", None),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(extra)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _cmd_fit(args):
    ds = _load(args)
    if args.form == "boxcox":
        fit = fit_boxcox(ds, use_iv=args.estimator == "iv")
        print(f"box-cox fit: lambda = {fit.lam:.6f}, beta0 = {fit.beta0:.6f}, "
              f"beta1 = {fit.beta1:.6f}")
        rows = [{"lambda": fit.lam, "beta0": fit.beta0, "beta1": fit.beta1}]
    else:
        fit = {"ols": fit_ols, "iv": fit_iv, "gmm": fit_gmm2step}[args.estimator](ds)
        se = np.sqrt(np.diag(fit.vcov))
        names = ["intercept"] + list(ds.column_names["x"]) if fit.intercept else list(
            ds.column_names["x"])
        print(f"{fit.method.value} fit on n = {ds.n}:")
        rows = []
        for name, b, s in zip(names, fit.beta, se):
            print(f"  {name:>12s}  {b:+.6f}  (se {s:.6f})")
            rows.append({"coefficient": name, "estimate": float(b), "std_error": float(s)})
        if fit.first_stage_f is not None:
            print(f"  first-stage F = {fit.first_stage_f:.3f}")
    if args.out:
        _write_csv(args.out, rows)
    if args.manifest:
        _write_manifest(args.manifest, args)
    return EXIT_OK


def _cmd_test(args):
    ds = _load(args)
    config = parse_config(args.config) if args.config else {}
    seed = config.get("rng.seed", args.seed)
    cfg = _test_config(args, config)
    report = test_model(ds, _model_spec(args), cfg, RngSpec(seed=seed))
    print(report.summary())
    if args.out:
        _write_csv(args.out, report.to_rows())
    if args.manifest:
        _write_manifest(args.manifest, args, {"seed": seed})
    alpha = args.alpha if args.alpha is not None else cfg.alpha_levels[1] if len(
        cfg.alpha_levels) > 1 else cfg.alpha_levels[0]
    if alpha not in report.levels:
        raise IvcheckError(f"alpha {alpha} not among the computed levels {cfg.alpha_levels}")
    return EXIT_REJECT if report.reject(alpha) else EXIT_OK


def _cmd_overid(args):
    ds = _load(args)
    instrument_fn = polynomial_instruments(args.degree)
    report = (sargan(ds, instrument_fn=instrument_fn) if args.statistic == "sargan"
              else hansen_j(ds, instrument_fn=instrument_fn))
    print(f"{report.method.value}: statistic = {report.statistic:.6f}, "
          f"dof = {report.dof}, p = {report.p_value:.6f}")
    if args.out:
        _write_csv(args.out, [{
            "method": report.method.value,
            "statistic": report.statistic,
            "dof": report.dof,
            "p_value": report.p_value,
        }])
    if args.manifest:
        _write_manifest(args.manifest, args)
    return EXIT_OK


def _cmd_identified_set(args):
    ds = _load(args)
    config = parse_config(args.config) if args.config else {}
    seed = config.get("rng.seed", args.seed)
    cfg = _test_config(args, config)
    grid = np.linspace(args.theta_lo, args.theta_hi, args.theta_count)
    if args.form != "linear":
        raise IvcheckError("identified-set supports --form linear only; the scalar "
                           "grid parameterizes the slope with the intercept profiled out")
    x_col = ds.x[:, 0] if ds.x.ndim == 2 else ds.x
    y = ds.y

    def slope_evaluator(x, theta):
        xv = np.asarray(x, dtype=float)
        if xv.ndim == 2:
            xv = xv[:, 0]
        return theta * xv + float(np.mean(y - theta * x_col))

    spec = replace(_model_spec(args), evaluator=slope_evaluator)
    result = identified_set(ds, spec, grid, args.alpha, cfg, RngSpec(seed=seed))
    if result.empty:
        print(f"identified set at alpha = {args.alpha}: empty (specification rejected "
              f"everywhere on the grid)")
    else:
        print(f"identified set at alpha = {args.alpha}: "
              f"[{min(result.accepted):.6f}, {max(result.accepted):.6f}] "
              f"({len(result.accepted)} of {len(result.theta_grid)} grid points)")
    if args.out:
        _write_csv(args.out, [
            {"theta": float(t), "accepted": int(t in result.accepted)}
            for t in result.theta_grid
        ])
    if args.manifest:
        _write_manifest(args.manifest, args, {"seed": seed})
    return EXIT_OK


def _cmd_mte(args):
    ds = _load(args)
    pf = fit_propensity(ds, method=args.propensity_method)
    cf = fit_control_function(ds, pf)
    uni = uniformity_diagnostic(pf)
    cond1 = condition1_diagnostic(pf, ds)
    print(f"first-stage rank diagnostics: KS to U[0,1] = {uni.overall:.4f}, "
          f"worst conditional bin = {uni.worst_bin:.4f}")
    coverage = min(cond1.coverage.values()) if cond1.coverage else float("nan")
    print(f"invertibility: {cond1.injectivity_violations} injectivity violations, "
          f"minimum rank coverage = {coverage:.4f}")
    rows = []
    if args.x is not None and args.x_prime is not None:
        for p in np.linspace(0.1, 0.9, 9):
            try:
                value = estimate_mte(cf, float(p), args.x, args.x_prime)
            except IvcheckError:
                continue
            rows.append({"p": float(p), "mte": value})
            print(f"  MTE(p={p:.2f}; {args.x}, {args.x_prime}) = {value:+.6f}")
    if args.asf_x is not None:
        bounds = ((args.y_lower, args.y_upper)
                  if args.y_lower is not None and args.y_upper is not None else None)
        asf = estimate_asf(cf, pf, args.asf_x, outcome_bounds=bounds)
        if asf.is_point:
            print(f"  ASF({args.asf_x}) = {asf.value:+.6f} "
                  f"(rank support [{asf.support[0]:.3f}, {asf.support[1]:.3f}])")
            rows.append({"x": args.asf_x, "asf": asf.value})
        else:
            lo, hi = asf.interval
            print(f"  ASF({args.asf_x}) in [{lo:+.6f}, {hi:+.6f}] (partial rank support "
                  f"[{asf.support[0]:.3f}, {asf.support[1]:.3f}])")
            rows.append({"x": args.asf_x, "asf_lower": lo, "asf_upper": hi})
    if args.out:
        _write_csv(args.out, rows)
    if args.manifest:
        _write_manifest(args.manifest, args)
    return EXIT_OK


def _cmd_simulate(args):
    config = parse_config(args.config) if args.config else {}
    seed = config.get("rng.seed", args.seed)
    reps = config.get("sim.replications", args.reps)
    cfg = _test_config(args, config)
    spec = DgpSpec(
        family=DgpFamily(args.family),
        n=args.n,
        lam=args.lam,
        L=args.deviation,
        sigma=args.sigma,
        rho=args.rho,
    )
    methods = [Method(m.strip()) for m in args.methods.split(",")]
    result = run_study([spec], methods, reps, cfg, RngSpec(seed=seed), jobs=args.jobs)
    for cell in result.cells:
        print(f"{cell.dgp}  {cell.method:>9s}  alpha = {cell.alpha:5.2%}  "
              f"rejection rate = {cell.rejection_rate:6.1%}  (MC se {cell.mc_se:.4f}, "
              f"{cell.replications} reps, {cell.failures} failures)")
    print(f"runtime: {result.runtime_seconds:.1f}s")
    if args.out:
        _write_csv(args.out, result.to_rows())
    if args.manifest:
        _write_manifest(args.manifest, args, {"seed": seed, "study": result.config})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivcheck",
        description="Specification tests for exogeneity and homoskedasticity in "
                    "separable models, via conditional-moment inequalities.",
    )
    parser.add_argument("--version", action="version", version=f"ivcheck {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the parametric first step")
    _add_data_args(p)
    p.add_argument("--form", choices=["linear", "boxcox"], default="linear")
    p.add_argument("--estimator", choices=["ols", "iv", "gmm"], default="ols")
    _add_common_args(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("test", help="run the conditional-moment specification test")
    _add_data_args(p)
    p.add_argument("--form", choices=["linear", "boxcox"], default="linear")
    p.add_argument("--conditioning", choices=["z", "x"], default="z",
                   help="condition moments on the instrument (z) or the regressor (x)")
    p.add_argument("--homoskedastic", action="store_true",
                   help="also test constant conditional variance of the error")
    p.add_argument("--method", choices=["series", "local-linear", "cell-means"],
                   default=None, help="conditional-mean estimator (default: series)")
    p.add_argument("--alpha", type=float, default=None,
                   help="level that decides the exit code (default: 0.05)")
    _add_common_args(p)
    p.set_defaults(func=_cmd_test)

    p = sub.add_parser("overid", help="classical overidentification benchmark")
    _add_data_args(p)
    p.add_argument("--statistic", choices=["sargan", "hansen-j"], default="sargan")
    p.add_argument("--degree", type=int, default=3,
                   help="polynomial degree of the instrument expansion (default: 3)")
    _add_common_args(p)
    p.set_defaults(func=_cmd_overid)

    p = sub.add_parser("identified-set", help="parameter values the test does not reject")
    _add_data_args(p)
    p.add_argument("--form", choices=["linear", "boxcox"], default="linear")
    p.add_argument("--conditioning", choices=["z", "x"], default="z")
    p.add_argument("--homoskedastic", action="store_true")
    p.add_argument("--method", choices=["series", "local-linear", "cell-means"], default=None)
    p.add_argument("--theta-lo", type=float, required=True)
    p.add_argument("--theta-hi", type=float, required=True)
    p.add_argument("--theta-count", type=int, default=41)
    p.add_argument("--alpha", type=float, default=0.05)
    _add_common_args(p)
    p.set_defaults(func=_cmd_identified_set)

    p = sub.add_parser("mte", help="control-function marginal effects and average "
                                   "structural function")
    _add_data_args(p)
    p.add_argument("--propensity-method", choices=["local-linear", "cell-means"],
                   default="local-linear")
    p.add_argument("--x", type=float, default=None, help="first evaluation point for the MTE")
    p.add_argument("--x-prime", type=float, default=None, help="second evaluation point")
    p.add_argument("--asf-x", type=float, default=None,
                   help="evaluation point for the average structural function")
    p.add_argument("--y-lower", type=float, default=None,
                   help="outcome lower bound (needed under partial rank support)")
    p.add_argument("--y-upper", type=float, default=None, help="outcome upper bound")
    _add_common_args(p)
    p.set_defaults(func=_cmd_mte)

    p = sub.add_parser("simulate", help="Monte Carlo size/power study")
    p.add_argument("--family", choices=[f.value for f in DgpFamily], required=True)
    p.add_argument("--n", type=int, required=True, help="sample size per replication")
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--lam", type=float, default=0.0, help="power-transform exponent")
    p.add_argument("--deviation", type=float, default=0.0, help="deviation scale L")
    p.add_argument("--sigma", type=float, default=1.0, help="deviation peakedness")
    p.add_argument("--rho", type=float, default=0.0, help="heteroskedasticity strength")
    p.add_argument("--methods", default="cmi",
                   help="comma-separated subset of cmi, sargan, hansen-j (default: cmi)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    _add_common_args(p)
    p.set_defaults(func=_cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; 2 is reserved for "reject H0"
        return EXIT_OK if exc.code in (0, None) else EXIT_ERROR
    try:
        return args.func(args)
    except IvcheckError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
