"""Config-file parsing and scenario execution: policy blocks, exposure
blocks, simulation scenarios (TOML)."""

from __future__ import annotations

import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ._common import SchemaError, as_fraction
from .design import BernoulliRule, FixedFraction, SaturationLevel, SaturationPolicy
from .exposure import ExposureConfig
from .inclusion import estimate_inclusion_mc
from .network import build_network
from .simharness import DgpSpec, generate_po_table, run_replications, synthetic_units

__all__ = [
    "load_toml",
    "parse_policy",
    "parse_exposure",
    "parse_dgp",
    "bundled_scenario_path",
    "run_scenario",
]


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise SchemaError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(f"{path}: {exc}")


def parse_policy(block: dict) -> SaturationPolicy:
    """Policy block: levels = [{label, prob, kind: fixed|bernoulli, value}]."""
    levels_spec = block.get("levels")
    if not levels_spec:
        raise SchemaError("policy block needs a nonempty 'levels' list")
    levels = []
    for lv in levels_spec:
        try:
            kind = lv.get("kind") or lv["rule"]["kind"]
            value = lv.get("value", lv.get("rule", {}).get("value"))
            if kind == "fixed":
                rule = FixedFraction(as_fraction(value))
            elif kind == "bernoulli":
                rule = BernoulliRule(float(as_fraction(value)))
            else:
                raise SchemaError(f"unknown rule kind {kind!r}")
            levels.append(
                SaturationLevel(label=str(lv["label"]), prob=float(lv["prob"]), rule=rule)
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad policy level {lv!r}: {exc}")
    try:
        return SaturationPolicy(levels=tuple(levels))
    except ValueError as exc:
        raise SchemaError(str(exc))


def parse_exposure(block: dict) -> ExposureConfig:
    try:
        return ExposureConfig(
            cutoff=as_fraction(block.get("cutoff", "1/2")),
            empty_within=int(block.get("empty_within", 0)),
            empty_between=int(block.get("empty_between", 0)),
            mode=str(block.get("mode", "full")),
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad exposure block: {exc}")


def parse_dgp(block: dict) -> DgpSpec:
    known = {
        "baseline_mean",
        "baseline_sd",
        "theta_a",
        "theta_s",
        "theta_h",
        "theta_as",
        "theta_ah",
        "noise_sd",
        "clamp",
    }
    extra = set(block) - known
    if extra:
        raise SchemaError(f"unknown dgp field(s): {sorted(extra)}")
    return DgpSpec(**{k: float(v) for k, v in block.items()})


def bundled_scenario_path(name: str) -> str:
    here = os.path.dirname(__file__)
    return os.path.join(here, "scenarios", f"{name}.toml")


def run_scenario(
    spec: dict,
    replications: int | None = None,
    draws: int | None = None,
    seed: int | None = None,
):
    """Execute a scenario spec end to end: synthetic geography, inclusion
    probabilities, potential outcomes, replication study. Returns the
    ReplicationReport. Optional arguments override the file's run block."""
    sc = spec.get("scenario", {})
    net_block = spec.get("network", {})
    run = spec.get("run", {})
    policy = parse_policy(spec.get("policy", {}))
    cfg = parse_exposure(spec.get("exposure", {}))
    dgp = parse_dgp(spec.get("dgp", {})) if "dgp" in spec else DgpSpec()

    seed = int(seed if seed is not None else sc.get("seed", 0))
    n_units = int(sc.get("n_units", 400))
    replications = int(replications or run.get("replications", 1000))
    draws = int(draws or run.get("draws", 100_000))
    alpha = float(run.get("alpha", 0.05))
    estimators = tuple(run.get("estimators", ["ht", "haj"]))
    threshold = float(net_block.get("threshold_km", 4.0))
    k_max = int(net_block.get("k_max", 3))
    m = int(net_block.get("m", 2))

    units = synthetic_units(
        n_units,
        seed,
        cluster_sizes=tuple(sc.get("cluster_sizes", [4, 6])),
        grid_spacing_km=float(sc.get("grid_spacing_km", 3.0)),
        center_jitter_km=float(sc.get("center_jitter_km", 0.5)),
        unit_spread_km=float(sc.get("unit_spread_km", 0.7)),
        threshold_km=threshold,
        k_max=k_max,
    )
    network = build_network(units, threshold_km=threshold, k_max=k_max)
    inclusion = estimate_inclusion_mc(policy, network, cfg, draws, [seed, 1], m=m)
    po = generate_po_table(network, dgp, [seed, 2])
    return run_replications(
        policy,
        network,
        cfg,
        po,
        inclusion,
        replications,
        [seed, 3],
        estimators=estimators,
        alpha=alpha,
    )
