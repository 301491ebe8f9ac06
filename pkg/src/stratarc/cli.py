"""Batch command-line front end.

Subcommands: strata (take-up tables, stratum shares, per-site moments),
estimate (cross-site fit with optional bootstrap), diagnose (residual
checks), and simulate (Monte Carlo harness). Everything printed in a
human-readable table is also present in the machine-readable JSON, and
re-running any command with identical inputs and seed is bit-identical.

Exit codes: 0 success, 2 input/usage problems, 1 runtime failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .bootstrap import BootstrapConfig, bootstrap_fit
from .data_model import ColumnSchema, Destination, ingest_csv, validate
from .diagnostics import plot_data, residual_diagnostics, write_plot_data
from .errors import StratarcError
from .regression import (
    DesignSpec,
    ModelKind,
    Parameterization,
    fit_itt,
    fit_late,
    overall_decomposition_check,
    population_weighted_effects,
)
from .simulation import DgpSpec, run_monte_carlo, synthetic_echs_template
from .strata import all_site_moments, stratum_proportions, take_up_proportions

SCHEMA_VERSION = 1

VALIDATION_ERRORS = (
    "MissingColumn", "BadValue", "EmptyDataset", "BadSpec", "BadTemplate",
    "BadLevel",
)


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _dump(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2, allow_nan=True)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _add_column_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("csv", help="input CSV file")
    parser.add_argument("--site-col", default="site")
    parser.add_argument("--arm-col", default="z")
    parser.add_argument("--dest-col", default="d")
    parser.add_argument("--outcome-col", default="y")
    parser.add_argument("--weight-col", default=None,
                        help="optional; missing means all weights are 1")
    parser.add_argument("--covariate-cols", default="",
                        help="comma-separated covariate columns")
    parser.add_argument("--dest-labels", default="e=e,lq=lq,hq=hq",
                        help="mapping raw destination labels, e.g. e=echs,lq=low,hq=high")


def _schema_from_args(args) -> ColumnSchema:
    labels = {}
    for part in args.dest_labels.split(","):
        canon, _, raw = part.partition("=")
        canon = canon.strip()
        raw = raw.strip() or canon
        try:
            dest = Destination(canon)
        except ValueError:
            raise StratarcError(f"bad --dest-labels entry {part!r}; keys must be e/lq/hq")
        labels[raw] = dest
    covs = tuple(c.strip() for c in args.covariate_cols.split(",") if c.strip())
    return ColumnSchema(
        site=args.site_col,
        arm=args.arm_col,
        dest=args.dest_col,
        outcome=args.outcome_col,
        weight=args.weight_col,
        covariates=covs,
        dest_labels=labels,
    )


def _load_dataset(args):
    if not os.path.exists(args.csv):
        raise FileNotFoundError(f"input file not found: {args.csv}")
    schema = _schema_from_args(args)
    dataset = ingest_csv(args.csv, schema)
    for diag in validate(dataset):
        _warn(diag.message)
    return dataset


def _resolved_columns(args) -> dict:
    return {
        "csv": args.csv,
        "site_col": args.site_col,
        "arm_col": args.arm_col,
        "dest_col": args.dest_col,
        "outcome_col": args.outcome_col,
        "weight_col": args.weight_col,
        "covariate_cols": args.covariate_cols,
        "dest_labels": args.dest_labels,
    }


def _moments_payload(moments) -> list[dict]:
    return [
        {
            "site_id": m.site_id,
            "late": m.late,
            "phi": m.phi,
            "itt": m.itt,
            "pi_lc": m.pi_lc,
            "pi_hc": m.pi_hc,
            "complier_mass": m.complier_mass,
            "n_treated": m.n_treated,
            "n_control": m.n_control,
            "degenerate": m.degenerate,
            "clipped": m.clipped,
            "covariates": m.covariates,
        }
        for m in moments
    ]


def _effects_pp(effects: dict) -> dict:
    return {k: {"value_pp": 100.0 * v["value"], "se_pp": 100.0 * v["se"]}
            for k, v in effects.items()}


# ---------------------------------------------------------------------------
# subcommands

def _cmd_strata(args) -> int:
    dataset = _load_dataset(args)
    table = take_up_proportions(dataset, weighted=True)
    strata_table = stratum_proportions(table)
    if strata_table.any_clipped:
        flagged = [s.value for s, c in strata_table.clipped.items() if c]
        _warn(f"negative raw stratum estimates clipped to 0: {flagged}")
    moments = all_site_moments(dataset, drop_degenerate=False)
    n_degenerate = sum(m.degenerate for m in moments)
    if n_degenerate:
        _warn(f"{n_degenerate} of {len(moments)} sites are degenerate (no compliers)")
    payload = {
        "schema": SCHEMA_VERSION,
        "config": _resolved_columns(args),
        "n_records": dataset.n,
        "n_sites": dataset.n_sites,
        "take_up": table.to_dict(),
        "strata": strata_table.to_dict(),
        "sites": _moments_payload(moments),
        "n_degenerate_sites": n_degenerate,
    }
    if args.format == "table":
        print(f"records: {dataset.n}   sites: {dataset.n_sites}")
        print("take-up proportions (rows: control, treatment):")
        for z in (0, 1):
            cells = "  ".join(f"{d.value}={table.p[z, j]:.4f}"
                              for j, d in enumerate(
                                  (Destination.ECHS, Destination.LOW_QUALITY,
                                   Destination.HIGH_QUALITY)))
            print(f"  z={z}: {cells}")
        print("stratum shares:")
        for s, v in strata_table.pi.items():
            mark = " (clipped)" if strata_table.clipped[s] else ""
            print(f"  {s.value:>3}: {v:.4f}{mark}")
        if args.out:
            _dump(payload, args.out)
    else:
        _dump(payload, args.out)
    if args.sites_csv:
        import csv as _csv

        with open(args.sites_csv, "w", newline="", encoding="utf-8") as fh:
            names = dataset.covariate_names
            writer = _csv.writer(fh)
            writer.writerow(["site_id", "late", "phi", "itt", "pi_lc", "pi_hc",
                             "complier_mass", "n_treated", "n_control",
                             "degenerate", "clipped", *names])
            for m in moments:
                writer.writerow([m.site_id, repr(m.late), repr(m.phi), repr(m.itt),
                                 repr(m.pi_lc), repr(m.pi_hc),
                                 repr(m.complier_mass), repr(m.n_treated),
                                 repr(m.n_control), m.degenerate, m.clipped,
                                 *(repr(m.covariates[n]) for n in names)])
    return 0


def _build_design_spec(args) -> DesignSpec:
    model = ModelKind(args.model)
    covs = tuple(c.strip() for c in args.covariates.split(",") if c.strip())
    return DesignSpec(
        model=model,
        parameterization=Parameterization(args.parameterization),
        covariate_names=covs,
        interaction_covariate=args.interaction,
    )


def _fit_for_args(dataset, args):
    spec = _build_design_spec(args)
    moments = all_site_moments(dataset, drop_degenerate=False)
    n_degenerate = sum(m.degenerate for m in moments)
    if n_degenerate:
        _warn(f"dropping {n_degenerate} degenerate sites from the regression")
    usable = [m for m in moments if not m.degenerate]
    site_weights = "complier-mass" if args.site_weights == "complier-mass" else None
    if spec.model is ModelKind.ITT:
        fit = fit_itt(usable, spec, hc=args.hc, site_weights=site_weights)
    else:
        fit = fit_late(usable, spec, hc=args.hc, site_weights=site_weights)
    return fit, usable, n_degenerate


def _cmd_estimate(args) -> int:
    dataset = _load_dataset(args)
    fit, moments, n_degenerate = _fit_for_args(dataset, args)
    if args.target == "population" and fit.spec.model is not ModelKind.ITT:
        pop = population_weighted_effects(fit)
        effects = {"itt_lc": pop.itt_lc.to_dict(), "itt_hc": pop.itt_hc.to_dict(),
                   "contrast": pop.contrast.to_dict()}
    else:
        effects = {k: e.to_dict() for k, e in fit.effects.items()}
    decomposition = overall_decomposition_check(
        dataset, effects["itt_lc"]["value"], effects["itt_hc"]["value"])
    payload = {
        "schema": SCHEMA_VERSION,
        "config": {
            **_resolved_columns(args),
            "model": args.model,
            "parameterization": args.parameterization,
            "covariates": args.covariates,
            "interaction": args.interaction,
            "hc": args.hc,
            "target": args.target,
            "site_weights": args.site_weights,
            "bootstrap": args.bootstrap,
            "seed": args.seed,
        },
        "n_sites_used": fit.n_sites,
        "n_degenerate_sites": n_degenerate,
        "fit": fit.to_dict(),
        "effects": effects,
        "effects_pp": _effects_pp(effects),
        "overall": decomposition.to_dict(),
    }
    if args.bootstrap:
        cfg = BootstrapConfig(replicates=args.bootstrap, seed=args.seed)
        boot = bootstrap_fit(dataset, fit.spec, cfg, hc=args.hc,
                             target=args.target, level=args.level)
        if boot.n_failed:
            _warn(f"{boot.n_failed} of {boot.n_requested} bootstrap replicates failed")
        payload["bootstrap"] = boot.to_dict()

    print(f"model={args.model} parameterization={args.parameterization} "
          f"hc={args.hc} target={args.target} sites={fit.n_sites}")
    for key in ("itt_lc", "itt_hc", "contrast"):
        e = effects[key]
        print(f"  {key:>8}: {e['value']:+.6f}  ({100 * e['value']:+.3f} pp)  "
              f"se={e['se']:.6f}")
    if args.bootstrap:
        for key, comb in payload["bootstrap"]["estimates"].items():
            print(f"  boot {key:>8}: {comb['point']:+.6f}  "
                  f"se={comb['total_se']:.6f}  "
                  f"ci=[{comb['ci_low']:+.6f}, {comb['ci_high']:+.6f}]")
    if args.out or args.format == "json":
        _dump(payload, args.out)
    return 0


def _cmd_diagnose(args) -> int:
    dataset = _load_dataset(args)
    fit, moments, _ = _fit_for_args(dataset, args)
    diag = residual_diagnostics(fit)
    rows = plot_data(diag, fit, moments)
    payload = {
        "schema": SCHEMA_VERSION,
        "config": {**_resolved_columns(args), "model": args.model,
                   "parameterization": args.parameterization,
                   "covariates": args.covariates, "hc": args.hc},
        "diagnostics": diag.to_dict(),
        "plot_data": rows,
    }
    print(f"slope={diag.slope:+.6f} se={diag.slope_se:.6f} z={diag.z_value:+.3f} "
          f"violation={'yes' if diag.violation else 'no'}")
    print(f"mean residual={diag.mean_residual:+.2e}")
    print(diag.heteroskedasticity_note)
    if args.plot_csv:
        write_plot_data(rows, args.plot_csv)
    if args.out or args.format == "json":
        _dump(payload, args.out)
    return 0


def _load_scenario(args) -> DgpSpec:
    if not args.scenario:
        if args.dgp == "calibrated":
            return DgpSpec(kind="calibrated", n_sites=38)
        return DgpSpec(kind="simple")
    path = args.scenario
    if not os.path.exists(path):
        raise FileNotFoundError(f"scenario file not found: {path}")
    if path.endswith(".toml"):
        import tomllib

        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    else:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    data.setdefault("kind", args.dgp)
    return DgpSpec.from_dict(data)


def _cmd_simulate(args) -> int:
    spec = _load_scenario(args)
    template = synthetic_echs_template() if spec.kind == "calibrated" else None
    threads = args.threads or int(os.environ.get("STRATARC_THREADS", "1"))
    report = run_monte_carlo(
        spec,
        reps=args.reps,
        seed=args.seed,
        template=template,
        estimators=tuple(args.estimators.split(",")),
        adjustments=tuple(args.adjustments.split(",")),
        bootstrap_replicates=args.bootstrap,
        hc=args.hc,
        target=args.target,
        threads=threads,
    )
    payload = {"schema": SCHEMA_VERSION, **report.to_dict()}
    for key, cell in sorted(payload["cells"].items()):
        print(f"{key}: bias={cell['bias']:+.5f} se={cell['empirical_se']:.5f} "
              f"rmse={cell['rmse']:.5f} coverage={cell['coverage']:.3f} "
              f"se_ratio={cell['se_ratio']:.3f}")
    _dump(payload, args.out)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stratarc",
        description="Principal causal effects in multi-site randomized trials",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_strata = sub.add_parser("strata", help="take-up, stratum shares, site moments")
    _add_column_flags(p_strata)
    p_strata.add_argument("--format", choices=["json", "table"], default="table")
    p_strata.add_argument("--out", default=None, help="write JSON report here")
    p_strata.add_argument("--sites-csv", default=None,
                          help="write per-site moments CSV here")
    p_strata.set_defaults(func=_cmd_strata)

    def _estimation_flags(p):
        _add_column_flags(p)
        p.add_argument("--model",
                       choices=["unadjusted", "adjusted", "interaction", "itt"],
                       default="unadjusted")
        p.add_argument("--parameterization",
                       choices=["two-slope", "intercept-phi", "intercept-phic"],
                       default="two-slope")
        p.add_argument("--covariates", default="",
                       help="comma-separated site covariates to adjust for")
        p.add_argument("--interaction", default=None,
                       help="covariate interacted with complier type")
        p.add_argument("--hc", choices=["hc0", "hc1"], default="hc1")
        p.add_argument("--site-weights", choices=["none", "complier-mass"],
                       default="none")
        p.add_argument("--format", choices=["json", "table"], default="table")
        p.add_argument("--out", default=None)

    p_est = sub.add_parser("estimate", help="fit the cross-site model")
    _estimation_flags(p_est)
    p_est.add_argument("--target", choices=["site", "population"], default="site")
    p_est.add_argument("--bootstrap", type=int, default=0, metavar="B",
                       help="bootstrap replicates (0 disables)")
    p_est.add_argument("--seed", type=int, default=0)
    p_est.add_argument("--level", type=float, default=0.95)
    p_est.set_defaults(func=_cmd_estimate)

    p_diag = sub.add_parser("diagnose", help="residual diagnostics for a fit")
    _estimation_flags(p_diag)
    p_diag.add_argument("--plot-csv", default=None,
                        help="write plot-ready site table here")
    p_diag.set_defaults(func=_cmd_diagnose)

    p_sim = sub.add_parser("simulate", help="Monte Carlo evaluation harness")
    p_sim.add_argument("--dgp", choices=["simple", "calibrated"], default="simple")
    p_sim.add_argument("--scenario", default=None,
                       help="JSON or TOML file fully specifying the scenario")
    p_sim.add_argument("--reps", type=int, default=500)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--bootstrap", type=int, default=200, metavar="B")
    p_sim.add_argument("--estimators", default="naive,bootstrap,oracle")
    p_sim.add_argument("--adjustments", default="unadjusted,adjusted,interaction")
    p_sim.add_argument("--hc", choices=["hc0", "hc1"], default="hc1")
    p_sim.add_argument("--target", choices=["site", "population"], default="site")
    p_sim.add_argument("--threads", type=int, default=0,
                       help="worker processes; 0 uses STRATARC_THREADS or 1")
    p_sim.add_argument("--out", default=None)
    p_sim.set_defaults(func=_cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except StratarcError as err:
        kind = type(err).__name__
        print(f"error: {err}", file=sys.stderr)
        return 2 if kind in VALIDATION_ERRORS else 1
    except (ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
