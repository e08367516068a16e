"""Design-based simulation laboratory.

Generates synthetic geographies and potential-outcome tables with known
estimands, replays the full pipeline over replicated assignments, and
reports bias, RMSE, CI coverage, and variance conservativeness. All
randomness is seeded; identical seeds give byte-identical reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._common import canonical_json, seed_key
from .data import ObservedData
from .design import SaturationPolicy, sample_assignment
from .estimators import (
    ContrastSpec,
    bie_contrast,
    de_contrast,
    estimate_effects,
    policy_contrasts,
    wie_contrast,
)
from .exposure import ExposureConfig, all_levels, cell_index, compute_exposures
from .inclusion import InclusionTable, WeightScheme, estimate_inclusion_mc, weights_from_table
from .network import Network, UnitRecord, build_network

__all__ = [
    "DgpSpec",
    "PotentialOutcomeTable",
    "TruthReport",
    "ReplicationReport",
    "SweepReport",
    "generate_po_table",
    "compute_truth",
    "run_replications",
    "consistency_sweep",
    "synthetic_units",
    "cell_contrasts",
]


@dataclass(frozen=True)
class DgpSpec:
    """Additive potential-outcome model: unit baseline plus exposure effects
    plus unit noise, clamped to +/- clamp."""

    baseline_mean: float = 1.0
    baseline_sd: float = 0.5
    theta_a: float = 1.0
    theta_s: float = 0.5
    theta_h: float = 0.25
    theta_as: float = 0.0
    theta_ah: float = 0.0
    noise_sd: float = 1.0
    clamp: float = 50.0

    def to_dict(self) -> dict:
        return {
            "baseline_mean": self.baseline_mean,
            "baseline_sd": self.baseline_sd,
            "theta_a": self.theta_a,
            "theta_s": self.theta_s,
            "theta_h": self.theta_h,
            "theta_as": self.theta_as,
            "theta_ah": self.theta_ah,
            "noise_sd": self.noise_sd,
            "clamp": self.clamp,
        }


@dataclass
class PotentialOutcomeTable:
    """Complete per-unit outcome table over the eight exposure cells."""

    values: np.ndarray  # (n, 8)
    spec: DgpSpec
    n_clamped: int = 0

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def observed(self, codes: np.ndarray) -> np.ndarray:
        """Outcome realized when each unit lands in the given cell."""
        return self.values[np.arange(self.n), codes]


def generate_po_table(network: Network, spec: DgpSpec, seed) -> PotentialOutcomeTable:
    rng = np.random.default_rng(seed_key(seed))
    n = network.n
    mu = rng.normal(spec.baseline_mean, spec.baseline_sd, n)
    eps = rng.normal(0.0, spec.noise_sd, n) if spec.noise_sd > 0 else np.zeros(n)
    values = np.empty((n, 8))
    for a, s, h in all_levels("full"):
        effect = (
            spec.theta_a * a
            + spec.theta_s * s
            + spec.theta_h * h
            + spec.theta_as * a * s
            + spec.theta_ah * a * h
        )
        values[:, cell_index((a, s, h))] = mu + effect + eps
    clipped = np.clip(values, -spec.clamp, spec.clamp)
    n_clamped = int((clipped != values).sum())
    return PotentialOutcomeTable(values=clipped, spec=spec, n_clamped=n_clamped)


def cell_contrasts(mode: str = "full") -> list[ContrastSpec]:
    """Single-cell 'contrasts' so cell means flow through the same engine."""
    out = []
    for lvl in all_levels(mode):
        if mode == "full":
            name = f"Y(a={lvl[0]},s={lvl[1]},h={lvl[2]})"
        else:
            name = f"Y(a={lvl[0]},s={lvl[1]})"
        out.append(ContrastSpec(name, ((1.0, lvl),)))
    return out


def _harness_contrasts(mode: str, include_policy: bool, include_treated: bool):
    specs = cell_contrasts(mode)
    specs += [de_contrast(s, h) for s in (0, 1) for h in (0, 1)]
    specs += [wie_contrast(1, 0, h, a=0) for h in (0, 1)]
    specs += [bie_contrast(s, a=0) for s in (0, 1)]
    if include_treated:
        specs += [wie_contrast(1, 0, h, a=1) for h in (0, 1)]
        specs += [bie_contrast(s, a=1) for s in (0, 1)]
    if include_policy:
        specs += policy_contrasts(mode, a=0)
    return specs


@dataclass
class TruthReport:
    """Exact estimand values computed from the potential-outcome table."""

    values: dict[str, float]
    undefined: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"values": self.values, "undefined": list(self.undefined)}


def compute_truth(
    po: PotentialOutcomeTable,
    inclusion: InclusionTable,
    weights: dict[str, WeightScheme] | None = None,
) -> TruthReport:
    """Ground-truth estimands: plain averages for conditional targets,
    weight-averaged tables for the policy-specific ones."""
    if inclusion.mode != "full":
        raise ValueError("the harness runs the full exposure mapping")
    vals: dict[str, float] = {}
    undefined: list[str] = []
    col = lambda lvl: po.values[:, cell_index(lvl)]
    for lvl in all_levels("full"):
        vals[f"Y(a={lvl[0]},s={lvl[1]},h={lvl[2]})"] = float(col(lvl).mean())
    for s in (0, 1):
        for h in (0, 1):
            vals[f"DE(s={s},h={h})"] = float((col((1, s, h)) - col((0, s, h))).mean())
    for a in (0, 1):
        for h in (0, 1):
            vals[f"WIE(a={a},h={h})"] = float((col((a, 1, h)) - col((a, 0, h))).mean())
        for s in (0, 1):
            vals[f"BIE(a={a},s={s})"] = float((col((a, s, 1)) - col((a, s, 0))).mean())
    if weights is not None:
        n = inclusion.n
        gde, gwie, gbie = weights["de"], weights["wie"], weights["bie"]

        def gweighted(scheme, a_val):
            total = np.zeros(n)
            for lvl in all_levels("full"):
                if lvl[0] != a_val:
                    continue
                total += scheme.gamma[:, cell_index(lvl)] * po.values[:, cell_index(lvl)]
            return total

        vals["DE_psi"] = float((gweighted(gde, 1) - gweighted(gde, 0)).mean())
        wie0 = np.zeros(n)
        for h in (0, 1):
            wie0 += gwie.gamma[:, cell_index((0, 1, h))] * col((0, 1, h))
            wie0 -= gwie.gamma[:, cell_index((0, 0, h))] * col((0, 0, h))
        vals["WIE_psi(a=0)"] = float(wie0.mean())
        bie0 = np.zeros(n)
        for s in (0, 1):
            bie0 += gbie.gamma[:, cell_index((0, s, 1))] * col((0, s, 1))
            bie0 -= gbie.gamma[:, cell_index((0, s, 0))] * col((0, s, 0))
        vals["BIE_psi(a=0)"] = float(bie0.mean())
        for name, scheme, cols in (
            ("DE_psi", gde, [l for l in all_levels("full")]),
            ("WIE_psi(a=0)", gwie, [l for l in all_levels("full") if l[0] == 0]),
            ("BIE_psi(a=0)", gbie, [l for l in all_levels("full") if l[0] == 0]),
        ):
            idx = [cell_index(l) for l in cols]
            if scheme.zero_flags[:, idx].any():
                undefined.append(name)
    return TruthReport(values=vals, undefined=tuple(undefined))


def _var_of_variance(x: np.ndarray) -> float:
    """MC standard error of the empirical variance (moment-based)."""
    r = len(x)
    if r < 4:
        return float("nan")
    xc = x - x.mean()
    m4 = float((xc**4).mean())
    s2 = float((xc**2).mean())
    val = (m4 - (r - 3) / (r - 1) * s2**2) / r
    return float(np.sqrt(max(val, 0.0)))


@dataclass
class ReplicationReport:
    """Aggregated estimator performance across replications."""

    rows: list[dict]
    meta: dict

    def to_dict(self) -> dict:
        return {"meta": self.meta, "rows": self.rows}

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def row(self, estimand: str, estimator: str) -> dict:
        for r in self.rows:
            if r["estimand"] == estimand and r["estimator"] == estimator:
                return r
        raise KeyError((estimand, estimator))


def run_replications(
    policy: SaturationPolicy,
    network: Network,
    cfg: ExposureConfig,
    po: PotentialOutcomeTable,
    inclusion: InclusionTable,
    replications: int,
    seed,
    estimators: tuple[str, ...] = ("ht", "haj"),
    alpha: float = 0.05,
    weights: dict[str, WeightScheme] | None = None,
    include_policy: bool = True,
    include_treated: bool = True,
    with_variance: bool = True,
    covariates: np.ndarray | None = None,
) -> ReplicationReport:
    """Replay the estimation pipeline over fresh assignment draws.

    The inclusion table is computed once by the caller and reused. Each
    replication's assignment seed is (master seed, replication index).
    Estimands that come back non-estimable in a replication are excluded
    from that estimand's aggregates, with the exclusion counted.
    """
    if replications < 1:
        raise ValueError("replications must be at least 1")
    if weights is None and include_policy:
        weights = {k: weights_from_table(inclusion, k) for k in ("de", "wie", "bie")}
    truth = compute_truth(po, inclusion, weights if include_policy else None)
    specs = _harness_contrasts(inclusion.mode, include_policy, include_treated)
    master = seed_key(seed)
    omega_cache: dict = {}

    acc: dict[tuple[str, str], dict] = {}
    for spec in specs:
        for kind in estimators:
            acc[(spec.name, kind)] = {"values": [], "vars": [], "covered": [], "excluded": 0}

    for rep in range(replications):
        assignment = sample_assignment(policy, network, master + [rep])
        expo = compute_exposures(assignment, network, cfg)
        y = po.observed(expo.cell_codes())
        data = ObservedData(
            unit_ids=network.unit_ids, y=y, exposures=expo, x=covariates
        )
        for kind in estimators:
            effects = estimate_effects(
                data,
                inclusion,
                specs,
                kind=kind,
                weights=weights,
                alpha=alpha,
                with_variance=with_variance,
                omega_cache=omega_cache,
            )
            for eff in effects:
                slot = acc[(eff.estimand, kind)]
                if eff.status != "ok":
                    slot["excluded"] += 1
                    continue
                slot["values"].append(eff.value)
                if with_variance:
                    slot["vars"].append(eff.variance.value)
                    t = truth.values.get(eff.estimand)
                    if t is not None:
                        slot["covered"].append(eff.ci_lo <= t <= eff.ci_hi)

    rows = []
    for spec in specs:
        t = truth.values.get(spec.name, float("nan"))
        for kind in estimators:
            slot = acc[(spec.name, kind)]
            vals = np.array(slot["values"])
            row = {
                "estimand": spec.name,
                "estimator": kind,
                "truth": t,
                "n_used": int(len(vals)),
                "n_excluded": int(slot["excluded"]),
            }
            if len(vals):
                mean = float(vals.mean())
                bias = mean - t
                var_emp = float(vals.var())
                row.update(
                    {
                        "mean": mean,
                        "bias": float(bias),
                        "rmse": float(np.sqrt(((vals - t) ** 2).mean())),
                        "var_emp": var_emp,
                        "var_emp_mcse": _var_of_variance(vals),
                    }
                )
                if with_variance and slot["vars"]:
                    row["var_est_mean"] = float(np.mean(slot["vars"]))
                    row["coverage"] = float(np.mean(slot["covered"]))
            rows.append(row)
    meta = {
        "replications": replications,
        "seed": master,
        "alpha": alpha,
        "estimators": list(estimators),
        "inclusion_draws": inclusion.draws,
        "inclusion_mode": inclusion.estimation,
        "policy_digest": policy.digest,
        "exposure_digest": cfg.digest,
        "network_digest": network.digest,
        "dgp": po.spec.to_dict(),
        "truth": truth.to_dict(),
    }
    return ReplicationReport(rows=rows, meta=meta)


def synthetic_units(
    n_units: int,
    seed,
    cluster_sizes: tuple[int, ...] = (4, 6),
    grid_spacing_km: float = 3.0,
    center_jitter_km: float = 0.5,
    unit_spread_km: float = 0.7,
    threshold_km: float = 4.0,
    k_max: int = 3,
    ensure_geo: bool = True,
    max_attempts: int = 60,
) -> list[UnitRecord]:
    """Clusters on a jittered grid, sized from ``cluster_sizes``.

    The grid spacing and jitter are chosen so that cross-cluster edges within
    the distance threshold arise naturally. With ensure_geo the layout is
    re-jittered (deterministically) until every unit has at least one
    geographic neighbor.
    """
    if n_units < min(cluster_sizes):
        raise ValueError("n_units smaller than the smallest cluster size")
    key = seed_key(seed)
    rng = np.random.default_rng(key)
    sizes: list[int] = []
    remaining = n_units
    if remaining % 2 == 1:
        sizes.append(7)  # odd residue: one size-7 cluster keeps every cell reachable
        remaining -= 7
        if remaining < 0:
            raise ValueError("odd n_units must be at least 7")
    while remaining > 0:
        choices = [c for c in cluster_sizes if c <= remaining]
        if not choices:
            # fold the residue into the last cluster (stays clear of size 5)
            sizes[-1] += remaining
            remaining = 0
            break
        pick = int(rng.choice(choices))
        if remaining - pick == 2 and 6 in cluster_sizes:
            pick = 6 if pick == 4 else pick
        sizes.append(pick)
        remaining -= pick

    k = len(sizes)
    side = math.ceil(math.sqrt(k))
    for attempt in range(max_attempts):
        jrng = np.random.default_rng(key + [attempt])
        units: list[UnitRecord] = []
        uid = 0
        for ci, size in enumerate(sizes):
            gx, gy = ci % side, ci // side
            cx = gx * grid_spacing_km + jrng.uniform(-center_jitter_km, center_jitter_km)
            cy = gy * grid_spacing_km + jrng.uniform(-center_jitter_km, center_jitter_km)
            for _ in range(size):
                units.append(
                    UnitRecord(
                        unit_id=f"u{uid:04d}",
                        cluster_id=f"c{ci:03d}",
                        x_km=float(cx + jrng.uniform(-unit_spread_km, unit_spread_km)),
                        y_km=float(cy + jrng.uniform(-unit_spread_km, unit_spread_km)),
                    )
                )
                uid += 1
        if not ensure_geo:
            return units
        net = build_network(units, threshold_km=threshold_km, k_max=k_max)
        if (net.geo_counts() >= 1).all():
            return units
    raise RuntimeError(
        f"could not place every unit within {threshold_km} km of a cross-cluster "
        f"neighbor in {max_attempts} attempts"
    )


@dataclass
class SweepReport:
    rows: list[dict]
    meta: dict

    def to_dict(self) -> dict:
        return {"meta": self.meta, "rows": self.rows}

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def consistency_sweep(
    policy: SaturationPolicy,
    dgp: DgpSpec,
    n_grid: tuple[int, ...],
    replications: int,
    draws: int,
    seed,
    cfg: ExposureConfig | None = None,
    cluster_sizes: tuple[int, ...] = (4, 6),
    threshold_km: float = 4.0,
    k_max: int = 3,
    grid_spacing_km: float = 3.0,
    unit_spread_km: float = 0.7,
) -> SweepReport:
    """RMSE of cell-mean estimators along an ascending n grid.

    Reports per-n aggregate RMSE (mean over the eight cells) for the
    unbiased and ratio estimators, plus the RMSE trend ratios.
    """
    if list(n_grid) != sorted(n_grid):
        raise ValueError("n grid must be ascending")
    key = seed_key(seed)
    cfg = cfg or ExposureConfig()
    rows = []
    for gi, n in enumerate(n_grid):
        units = synthetic_units(
            n,
            key + [71 + gi],
            cluster_sizes=cluster_sizes,
            grid_spacing_km=grid_spacing_km,
            unit_spread_km=unit_spread_km,
            threshold_km=threshold_km,
            k_max=k_max,
        )
        network = build_network(units, threshold_km=threshold_km, k_max=k_max)
        inclusion = estimate_inclusion_mc(
            policy, network, cfg, draws, key + [81 + gi], second_order=False
        )
        po = generate_po_table(network, dgp, key + [91 + gi])
        report = run_replications(
            policy,
            network,
            cfg,
            po,
            inclusion,
            replications,
            key + [101 + gi],
            estimators=("ht", "haj"),
            include_policy=False,
            include_treated=False,
            with_variance=False,
        )
        cells = [r for r in report.rows if r["estimand"].startswith("Y(")]
        agg = {}
        for kind in ("ht", "haj"):
            vals = [r["rmse"] for r in cells if r["estimator"] == kind and "rmse" in r]
            agg[kind] = float(np.mean(vals))
        rows.append({"n": n, "rmse_cells": agg})
    ratios = {}
    for kind in ("ht", "haj"):
        first, last = rows[0]["rmse_cells"][kind], rows[-1]["rmse_cells"][kind]
        ratios[kind] = float(last / first) if first > 0 else float("nan")
    meta = {
        "n_grid": list(n_grid),
        "replications": replications,
        "draws": draws,
        "seed": key,
        "dgp": dgp.to_dict(),
        "rmse_ratio_last_over_first": ratios,
    }
    return SweepReport(rows=rows, meta=meta)
