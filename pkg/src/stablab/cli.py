"""Command-line front door: fitting, prediction, decision scoring, the
simulation grids, known-parameter benchmarks, and the DDF reconstruction.

Exit codes: 0 success, 2 validation error, 3 numerical failure. All outputs
are deterministic given the flags; existing output files are only replaced
under --force.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys

import numpy as np

from stablab import ddf as ddfmod
from stablab.benchmark import BenchmarkInputs, benchmark_support_probability, ols_reference_crossing, vci_known
from stablab.data import DataError, parse_dataset, write_table
from stablab.ddf import SatUnavailable
from stablab.lmm import ConvergenceError, ModelSpec, build_design, fit_reml, predict
from stablab.rebuild import rebuild_report
from stablab.simlab import (
    GridResult,
    SimConfig,
    run_coverage_grid,
    run_decision_grid,
    run_margin_df_grid,
    summarize_boundary_frequencies,
)
from stablab.workflows import METHOD_LABELS, aicc_value, analyze

_EXIT_OK = 0
_EXIT_VALIDATION = 2
_EXIT_NUMERICAL = 3


def _load_dataset(path: str, lsl: float = math.nan):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_dataset(fh, lsl=lsl)


def _outfile(out_dir: str, name: str, force: bool) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    if os.path.exists(path) and not force:
        raise DataError(f"output file exists: {path} (use --force to replace)")
    return path


def _fit_payload(fit, label: str) -> dict:
    th = fit.theta_hat
    payload = {
        "model": label,
        "theta": {"sigma2_b0": th.sigma2_b0, "sigma2_b1": th.sigma2_b1,
                  "sigma2_e": th.sigma2_e},
        "beta": [float(b) for b in fit.beta_hat],
        "reml_loglik": fit.reml_loglik,
        "aicc": aicc_value(fit),
        "boundary_flags": dict(zip(fit.spec.vc_names, fit.boundary_flags)),
        "vcfrac": th.vcfrac(),
        "n": fit.n,
        "p": fit.p,
        "asycov_params": list(fit.asycov_params),
        "asycov": None if fit.asycov is None else [list(map(float, r)) for r in fit.asycov],
        "design_fingerprint": fit.design_fingerprint,
    }
    return payload


def _cmd_fit(args) -> int:
    ds = _load_dataset(args.data, args.lsl)
    design = build_design(ds, ModelSpec(args.model))
    fit = fit_reml(design, ds.values)
    path = _outfile(args.out, "fit.json", args.force)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_fit_payload(fit, args.model), fh, indent=2)
        fh.write("\n")
    print(path)
    return _EXIT_OK


def _parse_grid(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise DataError(f"bad --grid value: {exc}") from None


def _cmd_predict(args) -> int:
    ds = _load_dataset(args.data, args.lsl)
    design = build_design(ds, ModelSpec(args.model))
    fit = fit_reml(design, ds.values)
    grid = _parse_grid(args.grid)
    lots = ds.lot_levels
    rows = []
    if args.ddf == "contain":
        nus = {(lot, m): float(ddfmod.containment_ddf(design)) for lot in lots for m in grid}
    elif args.ddf == "sat":
        targets = [(lot, m, "conditional") for lot in lots for m in grid]
        reports = ddfmod.satterthwaite_ddf_batch(fit, targets)
        nus = {(lot, m): r.nu for (lot, m, _), r in zip(targets, reports)}
    else:
        nus = {(lot, m): float(ddfmod.residual_ddf(design)) for lot in lots for m in grid}
    for lot in lots:
        for m in grid:
            row = predict(fit, lot, m, "conditional", args.alpha, nus[(lot, m)])
            rows.append({"lot": lot, "month": m, "pred": row.pred,
                         "se_pred": row.se_pred, "ddf": row.ddf, "lcl": row.lcl,
                         "margin": row.lcl - ds.lsl})
    path = _outfile(args.out, "predictions.csv", args.force)
    write_table(rows, path)
    print(path)
    return _EXIT_OK


def _cmd_decide(args) -> int:
    ds = _load_dataset(args.data, args.lsl)
    result = analyze(ds, args.method, t_star=args.tstar, alpha=args.alpha)
    dec = result.decision
    payload = {
        "method": result.method_label,
        "final_model": result.final_model,
        "reduction_trace": [dataclasses.asdict(s) for s in result.reduction_trace],
        "t_star": dec.t_star,
        "lsl": dec.lsl,
        "support_at_t_star": dec.support_at_t_star,
        "worst_case_month": dec.worst_case_month,
        "first_crossing_month": {lot: m for lot, m in dec.first_crossing_month.items()},
    }
    jpath = _outfile(args.out, "decision.json", args.force)
    with open(jpath, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    mrows = [{"lot": r.lot_id, "month": r.month, "pred": r.pred, "se_pred": r.se_pred,
              "ddf": r.ddf, "lcl": r.lcl, "margin": r.lcl - ds.lsl}
             for r in result.predictions]
    cpath = _outfile(args.out, "margins.csv", args.force)
    write_table(mrows, cpath)
    print(jpath)
    print(cpath)
    return _EXIT_OK


def _load_config(path: str | None, seed_override: int | None) -> SimConfig:
    raw = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    if not isinstance(raw, dict):
        raise DataError("config must be a flat JSON object")
    known = {f.name for f in dataclasses.fields(SimConfig)}
    unknown = set(raw) - known
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    for key in ("months", "vcfrac_grid"):
        if key in raw:
            raw[key] = tuple(float(v) for v in raw[key])
    env_seed = os.environ.get("STABLAB_SEED")
    if seed_override is not None:
        raw["seed"] = seed_override
    elif env_seed is not None:
        raw["seed"] = int(env_seed)
    try:
        return SimConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad config: {exc}") from None


_FIGURES = ("fig4", "fig5", "table2", "fig6", "fig7", "fig8")


def _emit_grid(result: GridResult, out_dir: str, name: str, force: bool,
               drop: tuple[str, ...] = ()) -> str:
    rows = []
    for r in result.rows:
        rows.append({k: v for k, v in r.items() if k not in drop})
    path = _outfile(out_dir, name, force)
    write_table(rows, path)
    print(path)
    return path


def _cmd_simulate(args) -> int:
    config = _load_config(args.config, args.seed)
    which = _FIGURES if args.which == "all" else (args.which,)
    margin_result = None
    for item in which:
        if item in ("fig4", "fig5"):
            if margin_result is None:
                margin_result = run_margin_df_grid(config, jobs=args.jobs)
            if item == "fig4":
                _emit_grid(margin_result, args.out, "fig4_margin.csv", args.force,
                           drop=("mean_ddf",))
            else:
                _emit_grid(margin_result, args.out, "fig5_ddf.csv", args.force,
                           drop=("mean_margin",))
        elif item == "table2":
            _emit_grid(summarize_boundary_frequencies(config, jobs=args.jobs),
                       args.out, "table2_boundary.csv", args.force)
        elif item == "fig6":
            _emit_grid(run_coverage_grid(config, jobs=args.jobs),
                       args.out, "fig6_coverage.csv", args.force)
        elif item == "fig7":
            _emit_grid(run_decision_grid(config, jobs=args.jobs),
                       args.out, "fig7_oc.csv", args.force)
        elif item == "fig8":
            cfg52 = dataclasses.replace(config, crossing_month=52.0)
            _emit_grid(run_decision_grid(cfg52, jobs=args.jobs),
                       args.out, "fig8_oc52.csv", args.force)
    return _EXIT_OK


def _cmd_benchmark(args) -> int:
    config = _load_config(args.config, args.seed)
    calibrations = [config.crossing_month]
    if 52.0 not in calibrations:
        calibrations.append(52.0)
    rows = []
    for calibration in calibrations:
        for v in config.vcfrac_grid:
            inputs = BenchmarkInputs.from_config(config, v, crossing_month=calibration)
            # the pooled-regression reference crossing exists only at zero
            # lot variance
            t_ref = ols_reference_crossing(inputs) if v == 0.0 else math.nan
            rows.append({
                "vcfrac_true": v,
                "crossing_month": calibration,
                "v_ci": vci_known(inputs),
                "support_probability": benchmark_support_probability(inputs),
                "ols_reference_crossing": t_ref,
            })
    path = _outfile(args.out, "benchmark.csv", args.force)
    write_table(rows, path)
    print(path)
    return _EXIT_OK


def _cmd_rebuild(args) -> int:
    ds = _load_dataset(args.data, args.lsl)
    design = build_design(ds, ModelSpec("ri"))
    fit = fit_reml(design, ds.values)
    rows = rebuild_report(fit, args.lot, args.month, alpha=args.alpha)
    path = _outfile(args.out, "table3_rebuild.csv", args.force)
    write_table(rows, path)
    print(path)
    return _EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stablab",
        description="Stability shelf-life inference and simulation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="bounded-REML fit, JSON output")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--model", required=True, choices=["ris", "ri", "ols"])
    p_fit.add_argument("--lsl", type=float, default=math.nan)
    p_fit.add_argument("--out", default=".")
    p_fit.add_argument("--force", action="store_true")
    p_fit.set_defaults(func=_cmd_fit)

    p_pred = sub.add_parser("predict", help="conditional prediction rows, CSV output")
    p_pred.add_argument("--data", required=True)
    p_pred.add_argument("--model", required=True, choices=["ris", "ri", "ols"])
    p_pred.add_argument("--ddf", required=True, choices=["contain", "sat", "residual"])
    p_pred.add_argument("--grid", required=True, help="comma-separated months")
    p_pred.add_argument("--alpha", type=float, default=0.05)
    p_pred.add_argument("--lsl", type=float, required=True)
    p_pred.add_argument("--out", default=".")
    p_pred.add_argument("--force", action="store_true")
    p_pred.set_defaults(func=_cmd_predict)

    p_dec = sub.add_parser("decide", help="method decision summary + margins")
    p_dec.add_argument("--data", required=True)
    p_dec.add_argument("--method", required=True, choices=list(METHOD_LABELS))
    p_dec.add_argument("--tstar", type=float, default=48.0)
    p_dec.add_argument("--lsl", type=float, required=True)
    p_dec.add_argument("--alpha", type=float, default=0.05)
    p_dec.add_argument("--out", default=".")
    p_dec.add_argument("--force", action="store_true")
    p_dec.set_defaults(func=_cmd_decide)

    p_sim = sub.add_parser("simulate", help="Monte Carlo grids, per-figure CSVs")
    p_sim.add_argument("--config", default=None, help="flat JSON config")
    p_sim.add_argument("--which", default="all", choices=list(_FIGURES) + ["all"])
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--jobs", type=int, default=1)
    p_sim.add_argument("--out", default=".")
    p_sim.add_argument("--force", action="store_true")
    p_sim.set_defaults(func=_cmd_simulate)

    p_bench = sub.add_parser("benchmark", help="known-parameter benchmark CSV")
    p_bench.add_argument("--config", default=None)
    p_bench.add_argument("--seed", type=int, default=None)
    p_bench.add_argument("--out", default=".")
    p_bench.add_argument("--force", action="store_true")
    p_bench.set_defaults(func=_cmd_benchmark)

    p_reb = sub.add_parser("rebuild-satt", help="Satterthwaite DDF reconstruction")
    p_reb.add_argument("--data", required=True)
    p_reb.add_argument("--lot", required=True)
    p_reb.add_argument("--month", type=float, required=True)
    p_reb.add_argument("--alpha", type=float, default=0.05)
    p_reb.add_argument("--lsl", type=float, default=math.nan)
    p_reb.add_argument("--out", default=".")
    p_reb.add_argument("--force", action="store_true")
    p_reb.set_defaults(func=_cmd_rebuild)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_VALIDATION
    except (ConvergenceError, SatUnavailable, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return _EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return _EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
