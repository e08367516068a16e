"""Command-line entry point.

Subcommands: network (build + diagnostics), probs (inclusion probabilities
and in-policy weights), estimate (effect estimates from observed data),
simulate (synthetic-scenario replication study), diagnose (overlap report).
Exit codes: 0 success, 2 validation error, 3 positivity hard failure,
4 digest mismatch between pipeline stages.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from ._common import (
    DigestError,
    PositivityError,
    SchemaError,
    as_fraction,
    canonical_json,
)
from .config import bundled_scenario_path, load_toml, parse_policy, run_scenario


def _policy_from_file(path):
    block = load_toml(path)
    return parse_policy(block.get("policy", block))
from .data import ObservedData
from .design import AssignmentVector, policy_hazards
from .estimators import (
    conditional_effects,
    policy_effects,
    wie_variants_holding_treated,
)
from .exposure import ExposureConfig, cell_counts, compute_exposures, save_exposures_csv
from .inclusion import (
    estimate_inclusion_mc,
    exact_inclusion,
    load_inclusion,
    load_weights,
    positivity_report,
    save_inclusion,
    save_weights,
    weights_from_table,
)
from .network import (
    build_network,
    degree_diagnostics,
    dependency_graph,
    read_distance_csv,
    read_units_csv,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_POSITIVITY = 3
EXIT_DIGEST = 4


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_json(obj))
        fh.write("\n")


def _network_from_args(units, args, threshold=None, k_max=None):
    distances = read_distance_csv(args.distances) if getattr(args, "distances", None) else None
    return build_network(
        units,
        threshold_km=threshold if threshold is not None else args.threshold_km,
        k_max=k_max if k_max is not None else args.k_max,
        distances=distances,
    )


def cmd_network(args) -> int:
    units = read_units_csv(args.units)
    network = _network_from_args(units, args)
    graph = dependency_graph(network, args.m)
    report = degree_diagnostics(graph)
    out = network.to_dict()
    out["m"] = args.m
    out["degree_diagnostics"] = report.to_dict()
    _write_json(args.out, out)
    return EXIT_OK


def _exposure_from_args(args, cutoff=None) -> ExposureConfig:
    return ExposureConfig(
        cutoff=as_fraction(cutoff if cutoff is not None else args.cutoff),
        empty_within=args.empty_within,
        empty_between=args.empty_between,
        mode=args.mode,
    )


def cmd_probs(args) -> int:
    units = read_units_csv(args.units)
    policy = _policy_from_file(args.policy)
    network = _network_from_args(units, args)
    cfg = _exposure_from_args(args)
    hazards = policy_hazards(policy, network)
    if args.exact:
        table = exact_inclusion(policy, network, cfg, m=args.m)
    else:
        table = estimate_inclusion_mc(policy, network, cfg, args.draws, args.seed, m=args.m)
    save_inclusion(table, args.out)
    kinds = ("de", "wie") if cfg.mode == "reduced" else ("de", "wie", "bie")
    for kind in kinds:
        save_weights(weights_from_table(table, kind), args.out)
    if hazards:
        _write_json(os.path.join(args.out, "policy_hazards.json"), {"hazards": hazards})
    return EXIT_OK


def _assignment_from_units(units) -> AssignmentVector:
    missing = [u.unit_id for u in units if u.treatment is None]
    if missing:
        raise SchemaError(f"units missing treatment values: {missing[:5]}")
    return AssignmentVector(treatment=np.array([u.treatment for u in units]))


def _grid_values(raw: str, parser) -> list:
    return [parser(tok) for tok in str(raw).split(",") if tok != ""]


_ESTIMAND_GROUPS = ("conditional", "treated", "policy")


def cmd_estimate(args) -> int:
    outcome_cols = [c for c in args.outcome_cols.split(",") if c]
    units = read_units_csv(args.units, reserved_extra=outcome_cols)
    estimators = [e for e in args.estimator.split(",") if e]
    for e in estimators:
        if e not in ("ht", "haj", "ca"):
            raise SchemaError(f"unknown estimator kind {e!r}")
    if args.estimands == "all":
        groups = set(_ESTIMAND_GROUPS)
    else:
        groups = set(g for g in args.estimands.split(",") if g)
        unknown = groups - set(_ESTIMAND_GROUPS)
        if unknown:
            raise SchemaError(f"unknown estimand group(s): {sorted(unknown)}")

    cutoffs = _grid_values(args.cutoff, as_fraction)
    if args.net_grid:
        net_points = []
        for tok in args.net_grid.split(","):
            thr, k = tok.split(":")
            net_points.append((float(thr), int(k)))
    else:
        net_points = [(args.threshold_km, args.k_max)]
    if args.probs and (len(cutoffs) > 1 or len(net_points) > 1):
        raise SchemaError("grids require --policy (probabilities are recomputed per point)")
    if not args.probs and not args.policy:
        raise SchemaError("estimate needs either --probs or --policy")
    policy = _policy_from_file(args.policy) if args.policy else None

    rows = []
    grid_meta = []
    for cutoff in cutoffs:
        for thr, k in net_points:
            cfg = _exposure_from_args(args, cutoff=cutoff)
            network = _network_from_args(units, args, threshold=thr, k_max=k)
            if args.probs:
                table = load_inclusion(args.probs)
                if (
                    table.exposure_digest != cfg.digest
                    or table.network_digest != network.digest
                ):
                    raise DigestError(
                        "inclusion table digests do not match the requested "
                        "network/exposure configuration"
                    )
                wdir = args.weights or args.probs
                kinds = ("de", "wie") if cfg.mode == "reduced" else ("de", "wie", "bie")
                weights = {kind: load_weights(wdir, kind, table) for kind in kinds}
            else:
                table = estimate_inclusion_mc(
                    policy, network, cfg, args.draws, args.seed, m=args.m
                )
                kinds = ("de", "wie") if cfg.mode == "reduced" else ("de", "wie", "bie")
                weights = {kind: weights_from_table(table, kind) for kind in kinds}

            assignment = _assignment_from_units(units)
            covars = None
            if any(u.covariates for u in units):
                covars = np.array([u.covariates for u in units], dtype=float)
            for col in outcome_cols:
                outcomes = read_units_csv(args.units, outcome_col=col, reserved_extra=outcome_cols)
                y = np.array(
                    [u.outcome if u.outcome is not None else np.nan for u in outcomes]
                )
                if np.isnan(y).any():
                    raise SchemaError(f"missing {col!r} values in {args.units}")
                expo = compute_exposures(assignment, network, cfg)
                data = ObservedData(
                    unit_ids=network.unit_ids, y=y, exposures=expo, x=covars
                )
                tbl, wts = table, weights
                if args.drop_between_degenerate:
                    keep = np.nonzero(network.geo_counts() > 0)[0]
                    data = data.subset(keep)
                    tbl = table.subset(keep)
                    wts = {kind: w.subset(keep) for kind, w in weights.items()}
                effects = []
                for kind in estimators:
                    if "conditional" in groups:
                        effects += conditional_effects(data, tbl, kind=kind, alpha=args.alpha)
                    if "treated" in groups:
                        effects += wie_variants_holding_treated(
                            data, tbl, kind=kind, alpha=args.alpha
                        )
                    if "policy" in groups:
                        effects += policy_effects(data, tbl, wts, kind=kind, alpha=args.alpha)
                for eff in effects:
                    row = {
                        "cutoff": str(cfg.cutoff),
                        "threshold_km": thr,
                        "k_max": k,
                        "outcome": col,
                    }
                    row.update(eff.to_row())
                    row["components"] = eff.detail()
                    if eff.variance is not None:
                        row["variance_method"] = eff.variance.method
                        row["zero_joint_pairs"] = eff.variance.zero_pairs
                    rows.append(row)
            grid_meta.append(
                {
                    "cutoff": str(cfg.cutoff),
                    "threshold_km": thr,
                    "k_max": k,
                    "exposure_digest": cfg.digest,
                    "network_digest": network.digest,
                    "policy_digest": table.policy_digest,
                    "inclusion": {"estimation": table.estimation, "draws": table.draws},
                }
            )

    result = {
        "schema_version": 1,
        "alpha": args.alpha,
        "drop_between_degenerate": bool(args.drop_between_degenerate),
        "grid": grid_meta,
        "rows": rows,
    }
    _write_json(args.out, result)
    csv_path = os.path.splitext(args.out)[0] + ".csv"
    fields = [
        "cutoff",
        "threshold_km",
        "k_max",
        "estimand",
        "estimator",
        "outcome",
        "point",
        "se",
        "ci_lo",
        "ci_hi",
        "status",
        "flags",
    ]
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            out = dict(row)
            for fcol in ("point", "se", "ci_lo", "ci_hi"):
                out[fcol] = repr(float(out[fcol]))
            w.writerow(out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    path = args.scenario
    if not os.path.exists(path):
        candidate = bundled_scenario_path(path)
        if os.path.exists(candidate):
            path = candidate
        else:
            raise SchemaError(f"scenario not found: {args.scenario}")
    spec = load_toml(path)
    report = run_scenario(
        spec, replications=args.replications, draws=args.draws, seed=args.seed
    )
    sc = spec.get("scenario", {})
    out = report.to_dict()
    out["schema_version"] = 1
    out["scenario"] = {"name": sc.get("name", "unnamed"), "path": os.path.basename(path)}
    _write_json(args.out, out)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    table = load_inclusion(args.probs)
    report = positivity_report(table, args.floor)
    out = {
        "schema_version": 1,
        "policy_digest": table.policy_digest,
        "exposure_digest": table.exposure_digest,
        "network_digest": table.network_digest,
        "positivity": report.to_dict(),
    }
    if args.units:
        units = read_units_csv(args.units)
        if all(u.treatment is not None for u in units):
            network = _network_from_args(units, args)
            if network.digest != table.network_digest:
                raise DigestError(
                    "units/network do not match the inclusion table's network digest"
                )
            cfg = _exposure_from_args(args)
            if cfg.digest != table.exposure_digest:
                raise DigestError(
                    "exposure flags do not match the inclusion table's exposure digest"
                )
            expo = compute_exposures(_assignment_from_units(units), network, cfg)
            counts = cell_counts(expo)
            out["realized_cell_counts"] = {
                "(" + ",".join(map(str, k)) + ")": v for k, v in counts.items()
            }
            out["within_degenerate_units"] = int(expo.within_degenerate.sum())
            out["between_degenerate_units"] = int(expo.between_degenerate.sum())
            if args.export_exposures:
                save_exposures_csv(args.export_exposures, network.unit_ids, expo)
    _write_json(args.out, out)
    if not report.ok:
        sys.stderr.write(
            f"warning: {len(report.violations)} unit-cell(s) below the positivity floor\n"
        )
    return EXIT_OK


def _add_network_args(p, with_m=True):
    p.add_argument("--threshold-km", type=float, default=4.0)
    p.add_argument("--k-max", type=int, default=3)
    p.add_argument("--distances", default=None, help="optional distance table CSV")
    if with_m:
        p.add_argument("--m", type=int, default=2, help="dependence order (hops)")


def _add_exposure_args(p):
    p.add_argument("--cutoff", default="1/2", help="exposure cutoff, e.g. 1/2 or 1/3")
    p.add_argument("--empty-within", type=int, default=0, choices=(0, 1))
    p.add_argument("--empty-between", type=int, default=0, choices=(0, 1))
    p.add_argument("--mode", default="full", choices=("full", "reduced"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="satdesign",
        description="Design-based estimation for randomized saturation experiments "
        "with within- and between-cluster interference.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("network", help="build the network and report diagnostics")
    p.add_argument("--units", required=True)
    _add_network_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_network)

    p = sub.add_parser("probs", help="estimate inclusion probabilities and weights")
    p.add_argument("--units", required=True)
    p.add_argument("--policy", required=True, help="policy TOML")
    _add_network_args(p)
    _add_exposure_args(p)
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exact", action="store_true", help="exact enumeration instead of MC")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_probs)

    p = sub.add_parser("estimate", help="effect estimates from observed data")
    p.add_argument("--units", required=True)
    p.add_argument("--probs", default=None, help="inclusion-table directory")
    p.add_argument("--weights", default=None, help="weights directory (defaults to --probs)")
    p.add_argument("--policy", default=None, help="policy TOML (recompute probabilities)")
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    _add_network_args(p)
    _add_exposure_args(p)
    p.add_argument("--net-grid", default=None, help="threshold:k grid, e.g. 4:3,6:5,6:8")
    p.add_argument("--estimands", default="all", help="all or subset of conditional,treated,policy")
    p.add_argument("--estimator", default="ht,haj", help="comma list of ht,haj,ca")
    p.add_argument("--outcome-cols", default="outcome")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument(
        "--drop-between-degenerate",
        action="store_true",
        help="restrict to units with at least one geographic neighbor",
    )
    p.add_argument("--out", required=True, help="results JSON path (CSV written alongside)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="run a synthetic replication study")
    p.add_argument("--scenario", required=True, help="scenario TOML path or bundled name")
    p.add_argument("--replications", type=int, default=None)
    p.add_argument("--draws", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="positivity/overlap diagnostics")
    p.add_argument("--probs", required=True)
    p.add_argument("--floor", type=float, default=0.05)
    p.add_argument("--units", default=None, help="optional units CSV with treatments")
    _add_network_args(p)
    _add_exposure_args(p)
    p.add_argument("--export-exposures", default=None, help="write realized exposures CSV here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except DigestError as exc:
        sys.stderr.write(f"digest mismatch: {exc}\n")
        return EXIT_DIGEST
    except PositivityError as exc:
        sys.stderr.write(f"positivity violation: {exc}\n")
        return EXIT_POSITIVITY
    except (SchemaError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
