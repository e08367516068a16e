"""Inclusion probabilities and policy weights.

Estimates per-unit first-order cell probabilities and sparse second-order
pair probabilities by Monte Carlo over the design, or exactly by enumerating
the assignment support. Pairs outside the dependency graph's m-hop closure
are never stored: their joint probabilities factor exactly into products of
first-order terms. Also derives the policy weight tables (conditional
exposure probabilities) used by the reweighted estimators.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from ._common import DigestError, canonical_json, seed_key
from .design import SaturationPolicy, enumerate_assignments, sample_assignment_batch
from .exposure import ExposureConfig, all_levels, batch_cell_codes, cell_index, _batch_mats
from .network import DependencyGraph, Network, dependency_graph

__all__ = [
    "InclusionTable",
    "WeightScheme",
    "PositivityReport",
    "estimate_inclusion_mc",
    "exact_inclusion",
    "weights_from_table",
    "estimate_policy_weights",
    "positivity_report",
    "save_inclusion",
    "load_inclusion",
    "save_weights",
    "load_weights",
]


@dataclass
class InclusionTable:
    """First- and second-order exposure-cell probabilities under a design.

    ``second_order[p, c1, c2]`` is the joint probability that pair
    ``(pair_i[p], pair_j[p])`` realizes cells (c1, c2); only dependency-
    adjacent pairs are stored. ``joint`` falls back to the product of
    first-order terms for all other pairs.
    """

    unit_ids: tuple[str, ...]
    mode: str
    first_order: np.ndarray
    pair_i: np.ndarray
    pair_j: np.ndarray
    second_order: np.ndarray | None
    estimation: str
    draws: int | None
    seed: list[int] | None
    m: int
    policy_digest: str
    exposure_digest: str
    network_digest: str
    _pair_pos: dict[tuple[int, int], int] = field(default=None, repr=False)

    def __post_init__(self):
        if self._pair_pos is None:
            self._pair_pos = {
                (int(i), int(j)): p
                for p, (i, j) in enumerate(zip(self.pair_i, self.pair_j))
            }

    @property
    def n(self) -> int:
        return self.first_order.shape[0]

    @property
    def n_cells(self) -> int:
        return self.first_order.shape[1]

    @property
    def n_pairs(self) -> int:
        return len(self.pair_i)

    def first(self, i: int, level: tuple[int, ...]) -> float:
        return float(self.first_order[i, cell_index(level, self.mode)])

    def joint(
        self, i: int, j: int, level_i: tuple[int, ...], level_j: tuple[int, ...]
    ) -> float:
        ci = cell_index(level_i, self.mode)
        cj = cell_index(level_j, self.mode)
        return self.joint_by_code(i, j, ci, cj)

    def joint_by_code(self, i: int, j: int, ci: int, cj: int) -> float:
        if i == j:
            return float(self.first_order[i, ci]) if ci == cj else 0.0
        if i > j:
            i, j, ci, cj = j, i, cj, ci
        p = self._pair_pos.get((i, j))
        if p is None:
            return float(self.first_order[i, ci] * self.first_order[j, cj])
        if self.second_order is None:
            raise ValueError("second-order probabilities were not estimated")
        return float(self.second_order[p, ci, cj])

    def pair_probs_at(self, level: tuple[int, ...]) -> np.ndarray:
        """Same-level joint probabilities for all stored pairs."""
        if self.second_order is None:
            raise ValueError("second-order probabilities were not estimated")
        c = cell_index(level, self.mode)
        return self.second_order[:, c, c]

    def marginal(self, coord: str) -> np.ndarray:
        """Per-unit marginal probability that coordinate a/s/h equals one."""
        pos = {"a": 0, "s": 1, "h": 2}[coord]
        if self.mode == "reduced" and coord == "h":
            raise ValueError("reduced mode has no between-cluster coordinate")
        mask = [lvl[pos] == 1 for lvl in all_levels(self.mode)]
        return self.first_order[:, mask].sum(axis=1)

    def context_key(self) -> tuple:
        return (self.exposure_digest, self.network_digest, self.unit_ids)

    def check_context(self, other_key: tuple, what: str) -> None:
        if self.context_key() != other_key:
            raise DigestError(
                f"{what} was built under a different network/exposure configuration"
            )

    def subset(self, idx: np.ndarray) -> "InclusionTable":
        """Restrict to a subpopulation; keeps pairs internal to the subset."""
        idx = np.asarray(idx, dtype=np.intp)
        remap = -np.ones(self.n, dtype=np.intp)
        remap[idx] = np.arange(len(idx))
        keep = (remap[self.pair_i] >= 0) & (remap[self.pair_j] >= 0)
        sub_ids = tuple(self.unit_ids[i] for i in idx)
        return InclusionTable(
            unit_ids=sub_ids,
            mode=self.mode,
            first_order=self.first_order[idx].copy(),
            pair_i=remap[self.pair_i[keep]],
            pair_j=remap[self.pair_j[keep]],
            second_order=None if self.second_order is None else self.second_order[keep].copy(),
            estimation=self.estimation,
            draws=self.draws,
            seed=self.seed,
            m=self.m,
            policy_digest=self.policy_digest,
            exposure_digest=self.exposure_digest,
            network_digest=self.network_digest,
            _pair_pos=None,
        )


def _tally(
    codes_iter,
    n: int,
    n_cells: int,
    pair_i: np.ndarray,
    pair_j: np.ndarray,
    pair_chunk: int = 512,
):
    """Accumulate first-order and pair-level cell counts over code chunks.

    Counts are integers, so the merge across chunks is exact regardless of
    order.
    """
    unit_offsets = np.arange(n, dtype=np.int64) * n_cells
    first_counts = np.zeros(n * n_cells, dtype=np.int64)
    n_pairs = len(pair_i)
    pair_counts = (
        np.zeros((n_pairs, n_cells * n_cells), dtype=np.int64) if n_pairs else None
    )
    total = 0
    for codes in codes_iter:
        b = codes.shape[0]
        total += b
        flat = codes.astype(np.int64) + unit_offsets[None, :]
        first_counts += np.bincount(flat.ravel(), minlength=n * n_cells)
        if pair_counts is not None:
            for lo in range(0, n_pairs, pair_chunk):
                hi = min(lo + pair_chunk, n_pairs)
                ii = pair_i[lo:hi]
                jj = pair_j[lo:hi]
                joint = codes[:, ii].astype(np.int64) * n_cells + codes[:, jj]
                joint += np.arange(hi - lo, dtype=np.int64)[None, :] * (n_cells * n_cells)
                pair_counts[lo:hi] += np.bincount(
                    joint.ravel(), minlength=(hi - lo) * n_cells * n_cells
                ).reshape(hi - lo, n_cells * n_cells)
    return first_counts.reshape(n, n_cells), pair_counts, total


def estimate_inclusion_mc(
    policy: SaturationPolicy,
    network: Network,
    cfg: ExposureConfig,
    draws: int,
    seed,
    dependency: DependencyGraph | None = None,
    m: int = 2,
    second_order: bool = True,
    draw_chunk: int = 50_000,
) -> InclusionTable:
    """Estimate inclusion probabilities from ``draws`` Monte Carlo draws.

    Deterministic given (seed, draws). Cells never realized in the sample
    are recorded as exact zeros; positivity diagnostics decide what to do
    with them downstream.
    """
    if draws < 1:
        raise ValueError("draws must be at least 1")
    if second_order:
        if dependency is None:
            dependency = dependency_graph(network, m)
        pair_i, pair_j = dependency.closure_pairs()
        m_used = dependency.m
    else:
        pair_i = pair_j = np.empty(0, dtype=np.intp)
        m_used = dependency.m if dependency is not None else m

    mats = _batch_mats(network)
    treatments = sample_assignment_batch(policy, network, seed, draws)

    def chunks():
        for lo in range(0, draws, draw_chunk):
            yield batch_cell_codes(treatments[lo : lo + draw_chunk], network, cfg, mats)

    first_counts, pair_counts, total = _tally(chunks(), network.n, cfg.n_cells, pair_i, pair_j)
    first = first_counts / total
    second = None
    if second_order:
        second = (
            pair_counts.reshape(len(pair_i), cfg.n_cells, cfg.n_cells) / total
            if len(pair_i)
            else np.zeros((0, cfg.n_cells, cfg.n_cells))
        )
    return InclusionTable(
        unit_ids=network.unit_ids,
        mode=cfg.mode,
        first_order=first,
        pair_i=pair_i,
        pair_j=pair_j,
        second_order=second,
        estimation="mc",
        draws=draws,
        seed=seed_key(seed),
        m=m_used,
        policy_digest=policy.digest,
        exposure_digest=cfg.digest,
        network_digest=network.digest,
    )


def exact_inclusion(
    policy: SaturationPolicy,
    network: Network,
    cfg: ExposureConfig,
    dependency: DependencyGraph | None = None,
    m: int = 2,
    cap: int = 10**6,
) -> InclusionTable:
    """Exact inclusion probabilities by enumerating the assignment support."""
    if dependency is None:
        dependency = dependency_graph(network, m)
    pair_i, pair_j = dependency.closure_pairs()
    support = enumerate_assignments(policy, network, cap=cap)
    mats = _batch_mats(network)
    n, n_cells = network.n, cfg.n_cells

    first = np.zeros((n, n_cells))
    second = np.zeros((len(pair_i), n_cells, n_cells))
    vecs = np.stack([a for a, _ in support])
    probs = np.array([p for _, p in support])
    codes = batch_cell_codes(vecs, network, cfg, mats)
    np.add.at(first, (np.arange(n)[None, :], codes), probs[:, None])
    if len(pair_i):
        np.add.at(
            second,
            (
                np.arange(len(pair_i))[None, :],
                codes[:, pair_i],
                codes[:, pair_j],
            ),
            probs[:, None],
        )
    return InclusionTable(
        unit_ids=network.unit_ids,
        mode=cfg.mode,
        first_order=first,
        pair_i=pair_i,
        pair_j=pair_j,
        second_order=second,
        estimation="exact",
        draws=None,
        seed=None,
        m=dependency.m,
        policy_digest=policy.digest,
        exposure_digest=cfg.digest,
        network_digest=network.digest,
    )


@dataclass
class WeightScheme:
    """Per-unit policy weights: conditional exposure probabilities under a
    (possibly counterfactual) policy.

    kind "de" conditions on own treatment, "wie" on (treatment, within flag),
    "bie" on (treatment, between flag). Cells whose conditioning event has
    zero probability get weight zero and a flag.
    """

    kind: str
    gamma: np.ndarray
    zero_flags: np.ndarray
    mode: str
    unit_ids: tuple[str, ...]
    policy_digest: str
    exposure_digest: str
    network_digest: str
    draws: int | None = None
    seed: list[int] | None = None

    def at(self, level: tuple[int, ...]) -> np.ndarray:
        return self.gamma[:, cell_index(level, self.mode)]

    def context_key(self) -> tuple:
        return (self.exposure_digest, self.network_digest, self.unit_ids)

    def subset(self, idx: np.ndarray) -> "WeightScheme":
        idx = np.asarray(idx, dtype=np.intp)
        return WeightScheme(
            kind=self.kind,
            gamma=self.gamma[idx].copy(),
            zero_flags=self.zero_flags[idx].copy(),
            mode=self.mode,
            unit_ids=tuple(self.unit_ids[i] for i in idx),
            policy_digest=self.policy_digest,
            exposure_digest=self.exposure_digest,
            network_digest=self.network_digest,
            draws=self.draws,
            seed=self.seed,
        )


def weights_from_table(table: InclusionTable, kind: str) -> WeightScheme:
    """Derive a weight family from joint cell probabilities as frequency
    ratios, with explicit zero-denominator flags."""
    kind = kind.lower()
    n = table.n
    if table.mode == "full":
        probs = table.first_order.reshape(n, 2, 2, 2)
        if kind == "de":
            denom = probs.sum(axis=(2, 3), keepdims=True)
        elif kind == "wie":
            denom = probs.sum(axis=3, keepdims=True)
        elif kind == "bie":
            denom = probs.sum(axis=2, keepdims=True)
        else:
            raise ValueError(f"unknown weight kind {kind!r}")
        denom_b = np.broadcast_to(denom, probs.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            gamma = np.where(denom_b > 0, probs / np.where(denom_b > 0, denom_b, 1.0), 0.0)
        zero = (denom_b == 0).reshape(n, 8)
        gamma = gamma.reshape(n, 8)
    else:
        probs = table.first_order.reshape(n, 2, 2)
        if kind == "de":
            denom = probs.sum(axis=2, keepdims=True)
            denom_b = np.broadcast_to(denom, probs.shape)
            with np.errstate(divide="ignore", invalid="ignore"):
                gamma = np.where(
                    denom_b > 0, probs / np.where(denom_b > 0, denom_b, 1.0), 0.0
                )
            zero = (denom_b == 0).reshape(n, 4)
            gamma = gamma.reshape(n, 4)
        elif kind == "wie":
            # No between-cluster coordinate to average over: uniform weights.
            gamma = np.ones((n, 4))
            zero = np.zeros((n, 4), dtype=bool)
        else:
            raise ValueError("reduced mode has no between-cluster weight family")
    return WeightScheme(
        kind=kind,
        gamma=gamma,
        zero_flags=zero,
        mode=table.mode,
        unit_ids=table.unit_ids,
        policy_digest=table.policy_digest,
        exposure_digest=table.exposure_digest,
        network_digest=table.network_digest,
        draws=table.draws,
        seed=table.seed,
    )


def estimate_policy_weights(
    policy: SaturationPolicy,
    network: Network,
    cfg: ExposureConfig,
    kind: str,
    draws: int | None = None,
    seed=None,
    mode: str = "mc",
    cap: int = 10**6,
) -> WeightScheme:
    """Estimate a weight family under ``policy`` (Monte Carlo or exact)."""
    if mode == "mc":
        if draws is None or seed is None:
            raise ValueError("mc mode needs draws and seed")
        table = estimate_inclusion_mc(
            policy, network, cfg, draws, seed, second_order=False
        )
    elif mode == "exact":
        table = exact_inclusion(policy, network, cfg, cap=cap)
    else:
        raise ValueError("mode must be 'mc' or 'exact'")
    return weights_from_table(table, kind)


@dataclass
class PositivityReport:
    """Overlap diagnostics: low/zero cells, cell summaries, weight spread."""

    floor: float
    violations: list[dict]
    structural_zeros: list[dict]
    cell_summary: dict[str, dict[str, float]]
    marginal_summary: dict[str, dict[str, float]]
    weight_concentration: dict[str, float]

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "floor": self.floor,
            "n_violations": len(self.violations),
            "violations": self.violations,
            "n_structural_zeros": len(self.structural_zeros),
            "structural_zeros": self.structural_zeros,
            "cell_summary": self.cell_summary,
            "marginal_summary": self.marginal_summary,
            "max_weight_share": self.weight_concentration,
        }


def _level_name(level: tuple[int, ...]) -> str:
    return "(" + ",".join(str(v) for v in level) + ")"


def positivity_report(table: InclusionTable, floor: float) -> PositivityReport:
    """List units/cells below the positivity floor and summarize overlap."""
    if not 0 < floor < 1:
        raise ValueError("floor must lie in (0, 1)")
    levels = all_levels(table.mode)
    violations = []
    zeros = []
    cell_summary = {}
    concentration = {}
    for lvl in levels:
        c = cell_index(lvl, table.mode)
        col = table.first_order[:, c]
        name = _level_name(lvl)
        cell_summary[name] = {
            "mean": float(col.mean()),
            "std": float(col.std()),
            "median": float(np.median(col)),
            "min": float(col.min()),
        }
        pos = col[col > 0]
        if len(pos):
            inv = 1.0 / pos
            concentration[name] = float(inv.max() / inv.sum())
        else:
            concentration[name] = float("nan")
        for i in np.nonzero(col < floor)[0]:
            entry = {"unit_id": table.unit_ids[i], "cell": name, "prob": float(col[i])}
            violations.append(entry)
            if col[i] == 0.0:
                zeros.append(entry)
    marginal_summary = {}
    coords = ("a", "s") if table.mode == "reduced" else ("a", "s", "h")
    for coord in coords:
        marg = table.marginal(coord)
        marginal_summary[f"pr({coord}=1)"] = {
            "mean": float(marg.mean()),
            "std": float(marg.std()),
            "median": float(np.median(marg)),
        }
    return PositivityReport(
        floor=floor,
        violations=violations,
        structural_zeros=zeros,
        cell_summary=cell_summary,
        marginal_summary=marginal_summary,
        weight_concentration=concentration,
    )


def _meta_dict(table: InclusionTable) -> dict:
    return {
        "schema_version": 1,
        "mode": table.mode,
        "estimation": table.estimation,
        "draws": table.draws,
        "seed": table.seed,
        "m": table.m,
        "policy_digest": table.policy_digest,
        "exposure_digest": table.exposure_digest,
        "network_digest": table.network_digest,
        "unit_ids": list(table.unit_ids),
    }


def _level_columns(mode: str, suffix: str = "") -> list[str]:
    base = ["a", "s", "h"] if mode == "full" else ["a", "s"]
    return [c + suffix for c in base]


def save_inclusion(table: InclusionTable, out_dir) -> None:
    """Persist as meta.json + first_order.csv + second_order.csv (nonzero rows)."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        fh.write(canonical_json(_meta_dict(table)))
        fh.write("\n")
    levels = all_levels(table.mode)
    with open(os.path.join(out_dir, "first_order.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id"] + _level_columns(table.mode) + ["prob"])
        for i, uid in enumerate(table.unit_ids):
            for lvl in levels:
                w.writerow([uid, *lvl, repr(float(table.first_order[i, cell_index(lvl, table.mode)]))])
    with open(os.path.join(out_dir, "second_order.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["unit_i", "unit_j"]
            + _level_columns(table.mode)
            + _level_columns(table.mode, "2")
            + ["prob"]
        )
        if table.second_order is not None:
            for p in range(table.n_pairs):
                ui = table.unit_ids[table.pair_i[p]]
                uj = table.unit_ids[table.pair_j[p]]
                for l1 in levels:
                    for l2 in levels:
                        v = table.second_order[
                            p, cell_index(l1, table.mode), cell_index(l2, table.mode)
                        ]
                        if v != 0.0:
                            w.writerow([ui, uj, *l1, *l2, repr(float(v))])


def load_inclusion(in_dir) -> InclusionTable:
    with open(os.path.join(in_dir, "meta.json")) as fh:
        meta = json.load(fh)
    unit_ids = tuple(meta["unit_ids"])
    index = {u: i for i, u in enumerate(unit_ids)}
    mode = meta["mode"]
    n_cells = 8 if mode == "full" else 4
    ncoord = 3 if mode == "full" else 2
    first = np.zeros((len(unit_ids), n_cells))
    with open(os.path.join(in_dir, "first_order.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            lvl = tuple(int(row[c]) for c in _level_columns(mode))
            first[index[row["unit_id"]], cell_index(lvl, mode)] = float(row["prob"])
    pair_entries: dict[tuple[int, int], np.ndarray] = {}
    with open(os.path.join(in_dir, "second_order.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            i, j = index[row["unit_i"]], index[row["unit_j"]]
            block = pair_entries.setdefault((i, j), np.zeros((n_cells, n_cells)))
            l1 = tuple(int(row[c]) for c in _level_columns(mode))
            l2 = tuple(int(row[c]) for c in _level_columns(mode, "2"))
            block[cell_index(l1, mode), cell_index(l2, mode)] = float(row["prob"])
    pairs = sorted(pair_entries)
    pair_i = np.array([p[0] for p in pairs], dtype=np.intp)
    pair_j = np.array([p[1] for p in pairs], dtype=np.intp)
    second = (
        np.stack([pair_entries[p] for p in pairs])
        if pairs
        else np.zeros((0, n_cells, n_cells))
    )
    return InclusionTable(
        unit_ids=unit_ids,
        mode=mode,
        first_order=first,
        pair_i=pair_i,
        pair_j=pair_j,
        second_order=second,
        estimation=meta["estimation"],
        draws=meta["draws"],
        seed=meta["seed"],
        m=meta["m"],
        policy_digest=meta["policy_digest"],
        exposure_digest=meta["exposure_digest"],
        network_digest=meta["network_digest"],
    )


def save_weights(scheme: WeightScheme, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"weights_{scheme.kind}.csv")
    levels = all_levels(scheme.mode)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id"] + _level_columns(scheme.mode) + ["gamma", "zero_flag"])
        for i, uid in enumerate(scheme.unit_ids):
            for lvl in levels:
                c = cell_index(lvl, scheme.mode)
                w.writerow(
                    [uid, *lvl, repr(float(scheme.gamma[i, c])), int(scheme.zero_flags[i, c])]
                )


def load_weights(in_dir, kind: str, table: InclusionTable) -> WeightScheme:
    """Load a weight family saved next to the inclusion table it derives from."""
    path = os.path.join(in_dir, f"weights_{kind}.csv")
    index = {u: i for i, u in enumerate(table.unit_ids)}
    gamma = np.zeros((table.n, table.n_cells))
    zero = np.zeros((table.n, table.n_cells), dtype=bool)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            lvl = tuple(int(row[c]) for c in _level_columns(table.mode))
            c = cell_index(lvl, table.mode)
            i = index[row["unit_id"]]
            gamma[i, c] = float(row["gamma"])
            zero[i, c] = bool(int(row["zero_flag"]))
    return WeightScheme(
        kind=kind,
        gamma=gamma,
        zero_flags=zero,
        mode=table.mode,
        unit_ids=table.unit_ids,
        policy_digest=table.policy_digest,
        exposure_digest=table.exposure_digest,
        network_digest=table.network_digest,
        draws=table.draws,
        seed=table.seed,
    )
