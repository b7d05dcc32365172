"""Command-line front end: ``matchkit <subcommand> ...``.

Every subcommand writes plain CSV/JSON artifacts into ``--output-dir``.
Failures print a one-line JSON object on stderr and exit with
2 (bad input), 3 (numerical failure) or 4 (solver fallback under --strict).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .data import (BaseLookupError, SchemaError, ValidationError, load_panel, normalize_scales, parse_base,
                   write_panel)
from .diagnostics import DegenerateRegressionError, market_summaries, residual_independence_check
from .elasticity import DegenerateDesignError, SurrogateCoefficients, elasticity_frame, fit_surrogate
from .estimator import (EfficiencySeries, KernelConfig, NoLocalSupportError, TracingError, default_a_grid,
                        estimate_efficiency)
from .mismatch import allocation_frame, cd_mismatch_index, mismatch_frame, mismatch_series, period_states
from .simulation import generate_cd_dgp, preset, run_bias_experiment

log = logging.getLogger("matchkit")

EXIT_INPUT, EXIT_NUMERIC, EXIT_FALLBACK = 2, 3, 4
INPUT_ERRORS = (SchemaError, ValidationError, BaseLookupError, FileNotFoundError, ValueError)
NUMERIC_ERRORS = (NoLocalSupportError, TracingError, DegenerateDesignError, DegenerateRegressionError)
BOOL_FLAGS = {"strict", "cd_heterogeneous", "dump_allocations", "write_panel", "no_constant"}
INT_KEYS = {"T", "L", "a_grid", "u_grid", "cdf_grid", "seed", "replications", "threads", "min_obs"}
FLOAT_KEYS = {"bandwidth", "cd_sigma", "dependence_knob", "a_min", "a_max"}


class StrictFallback(RuntimeError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=False, help="panel file (CSV or JSON)")
    p.add_argument("--output-dir", default=".", help="directory for artifacts")
    p.add_argument("--format", choices=("csv", "json"), default=None, help="input format (default: by suffix)")
    p.add_argument("--log-level", default="WARNING")
    p.add_argument("--strict", action="store_true", help="treat solver fallbacks as failures (exit 4)")
    p.add_argument("--threads", type=int, default=None, help="worker cap (default: MATCHKIT_THREADS or 1)")
    p.add_argument("--config", default=None, help="flat key=value file mirroring the flags")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matchkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate-efficiency", help="recover the latent efficiency series")
    _common(p)
    p.add_argument("--base", default="first", help="'first' or MARKET:PERIOD")
    p.add_argument("--bandwidth", type=float, default=0.01)
    p.add_argument("--a-grid", type=int, default=201, help="points in the efficiency grid")
    p.add_argument("--a-min", type=float, default=1 / 16)
    p.add_argument("--a-max", type=float, default=16.0)
    p.add_argument("--u-grid", type=int, default=64, help="points in the unemployed grid")
    p.add_argument("--cdf-grid", type=int, default=512)
    p.add_argument("--scaling", choices=("mean_one", "none"), default="mean_one")
    p.add_argument("--min-obs", type=int, default=30)
    p.set_defaults(func=cmd_estimate_efficiency)

    p = sub.add_parser("estimate-elasticity", help="fit the quadratic surrogate and elasticities")
    _common(p)
    p.add_argument("--efficiency", required=False, help="efficiency CSV from estimate-efficiency")
    p.add_argument("--lambda", dest="lam", default="cv", help="'cv' or a nonnegative penalty")
    p.add_argument("--eta-mode", choices=("AU", "U"), default="AU")
    p.add_argument("--seed", type=int, default=0, help="fold-assignment seed for cv")
    p.add_argument("--scaling", choices=("mean_one", "none"), default="mean_one")
    p.set_defaults(func=cmd_estimate_elasticity)

    p = sub.add_parser("mismatch", help="planner allocation and mismatch index per period")
    _common(p)
    p.add_argument("--efficiency", required=False)
    p.add_argument("--coeffs", required=False, help="coefficients JSON from estimate-elasticity")
    p.add_argument("--cd-sigma", type=float, default=None, help="also report the Cobb-Douglas index")
    p.add_argument("--cd-heterogeneous", action="store_true", help="let efficiency enter the Cobb-Douglas index")
    p.add_argument("--dump-allocations", action="store_true")
    p.set_defaults(func=cmd_mismatch)

    p = sub.add_parser("simulate", help="synthetic experiments with known truth")
    _common(p)
    p.add_argument("--preset", choices=("recovery", "bias", "independence"), default="recovery")
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--L", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replications", type=int, default=1)
    p.add_argument("--dependence-knob", type=float, default=None)
    p.add_argument("--write-panel", action="store_true", help="also write the first simulated panel")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="residual independence check and market ratios")
    _common(p)
    p.add_argument("--efficiency", required=False)
    p.add_argument("--no-constant", action="store_true", help="drop the intercept from the residual regressions")
    p.set_defaults(func=cmd_diagnose)
    return parser


def read_config(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key=value`` file; ``#`` starts a comment, keys use flag spelling."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SchemaError(f"config line {n}: expected key=value")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def _apply_config(args: argparse.Namespace, argv: list[str]) -> None:
    """Fill options that were not given on the command line from --config."""
    if not args.config:
        return
    def norm(k):
        return "lam" if k == "lambda" else k

    given = {norm(a.split("=", 1)[0].lstrip("-").replace("-", "_")) for a in argv if a.startswith("--")}
    for key, value in read_config(args.config).items():
        key = norm(key)
        if key in given or not hasattr(args, key):
            continue
        if key in BOOL_FLAGS:
            setattr(args, key, value.lower() in ("1", "true", "yes", "on"))
        elif key in INT_KEYS:
            setattr(args, key, int(value))
        elif key in FLOAT_KEYS:
            setattr(args, key, float(value))
        else:
            setattr(args, key, value)


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise SchemaError(f"--{name.replace('_', '-')} is required for {args.command}")


def _outdir(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default), encoding="utf-8")


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.bool_,)):
        return bool(x)
    raise TypeError(type(x))


def _threads(args) -> int:
    return int(args.threads or os.environ.get("MATCHKIT_THREADS", "1"))


def _panel(args):
    _require(args, "input")
    return load_panel(args.input, args.format)


def cmd_estimate_efficiency(args) -> int:
    panel = _panel(args)
    cfg = KernelConfig(bandwidth=args.bandwidth, cdf_grid_size=args.cdf_grid,
                       a_grid=default_a_grid(args.a_grid, args.a_min, args.a_max), u_grid_size=args.u_grid)
    est = estimate_efficiency(panel, parse_base(args.base), cfg, args.scaling, args.min_obs)
    out = _outdir(args)
    est.series.save(out / "efficiency.csv")
    est.distribution.save(out / "distribution.json")
    (out / "scale.json").write_text(est.panel.scale_json(), encoding="utf-8")
    n_clip = int(sum(str(f).startswith("clipped") for f in est.series.flag))
    if n_clip:
        log.warning("%d observations clipped to the efficiency grid edge", n_clip)
    return 0


def cmd_estimate_elasticity(args) -> int:
    _require(args, "efficiency")
    panel = normalize_scales(_panel(args), args.scaling)
    A = EfficiencySeries.load(args.efficiency).aligned(panel)
    lam = args.lam if args.lam == "cv" else float(args.lam)
    coeffs = fit_surrogate(panel, A, lam, seed=args.seed)
    out = _outdir(args)
    coeffs.save(out / "coefficients.json")
    elasticity_frame(panel, A, coeffs, args.eta_mode).to_csv(out / "elasticity.csv", index=False, float_format="%.17g")
    return 0


def cmd_mismatch(args) -> int:
    _require(args, "efficiency", "coeffs")
    panel = _panel(args)
    A = EfficiencySeries.load(args.efficiency).aligned(panel)
    coeffs = SurrogateCoefficients.load(args.coeffs)
    sols = mismatch_series(panel, A, coeffs)
    out = _outdir(args)
    frame = mismatch_frame(sols)
    if args.cd_sigma is not None:
        # the Cobb-Douglas index is invariant to separate rescaling of U and V
        by_period = {p: st for p, st, _ in period_states(panel, A)}
        cd = [np.nan if by_period[s.period] is None else
              cd_mismatch_index(by_period[s.period], args.cd_sigma, args.cd_heterogeneous) for s in sols]
        frame["cd_index"] = cd
    frame.to_csv(out / "mismatch.csv", index=False, float_format="%.17g")
    if args.dump_allocations:
        allocation_frame(sols, coeffs.scale["U"]).to_csv(out / "allocations.csv", index=False, float_format="%.17g")
    fallback = sum(s.status == "nonconcave_fallback" for s in sols)
    if fallback:
        log.warning("%d periods solved by the nonconcave fallback", fallback)
        if args.strict:
            raise StrictFallback(f"{fallback} periods used the nonconcave fallback")
    return 0


def cmd_simulate(args) -> int:
    cfg, kcfg, pipelines = preset(args.preset, args.seed, T=args.T, L=args.L, dependence_knob=args.dependence_knob)
    t0 = time.perf_counter()
    report = run_bias_experiment(cfg, args.replications, kcfg, pipelines=pipelines, workers=_threads(args))
    out = _outdir(args)
    doc = report.to_dict()
    doc["preset"] = args.preset
    log.info("simulation took %.2f s", time.perf_counter() - t0)
    if args.preset == "recovery":
        first = report.rows[0]
        doc["corr_logA"] = first["corr_logA"]
        doc["rmse_logA"] = first["rmse_logA"]
    _write_json(out / "simulation_report.json", doc)
    if args.write_panel:
        first_cfg = dataclasses.replace(cfg, seed=report.rows[0]["seed"])
        write_panel(generate_cd_dgp(first_cfg)[0], out / "simulated_panel.csv")
    return 0


def cmd_diagnose(args) -> int:
    _require(args, "efficiency")
    panel = _panel(args)
    A = EfficiencySeries.load(args.efficiency).aligned(panel)
    check = residual_independence_check(panel, A, constant=not args.no_constant)
    out = _outdir(args)
    _write_json(out / "independence.json", {"correlation": None if np.isnan(check.correlation) else check.correlation,
                                            "n": len(panel), "constant": not args.no_constant})
    check.frame(panel).to_csv(out / "residuals.csv", index=False, float_format="%.17g")
    market_summaries(panel).to_csv(out / "summaries.csv", index=False, float_format="%.17g")
    return 0


def _fail(code: int, exc: BaseException) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    row = getattr(exc, "row", None)
    if row is not None:
        err["row"] = row
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_config(args, argv)
        return args.func(args)
    except StrictFallback as exc:
        return _fail(EXIT_FALLBACK, exc)
    except NUMERIC_ERRORS as exc:
        return _fail(EXIT_NUMERIC, exc)
    except INPUT_ERRORS as exc:
        return _fail(EXIT_INPUT, exc)


if __name__ == "__main__":
    sys.exit(main())
