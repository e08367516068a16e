"""Two-stage randomized saturation policies.

A policy draws a saturation level independently for each cluster, then
assigns treatment within the cluster by the level's rule: FixedFraction
(exactly round-half-up(f * n_k) treated units, chosen uniformly) or
Bernoulli (independent unit-level coins). Provides sampling and exact
enumeration of the assignment support with probabilities.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ._common import SupportTooLargeError, as_fraction, round_half_up, seed_key, stable_digest
from .network import Network

__all__ = [
    "FixedFraction",
    "BernoulliRule",
    "SaturationLevel",
    "SaturationPolicy",
    "AssignmentVector",
    "sample_assignment",
    "sample_assignment_batch",
    "enumerate_assignments",
    "policy_support_size",
]

ENUMERATION_CAP = 10**6


@dataclass(frozen=True)
class FixedFraction:
    """Treat exactly round-half-up(fraction * n_k) units, uniformly at random."""

    fraction: Fraction

    def __post_init__(self):
        f = as_fraction(self.fraction)
        object.__setattr__(self, "fraction", f)
        if not 0 <= f <= 1:
            raise ValueError("FixedFraction must lie in [0, 1]")

    def treated_count(self, n_k: int) -> int:
        return round_half_up(self.fraction * n_k)

    def spec(self) -> dict:
        return {"kind": "fixed", "value": str(self.fraction)}


@dataclass(frozen=True)
class BernoulliRule:
    """Independent unit-level treatment coins with probability p."""

    p: float

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise ValueError("Bernoulli p must lie in [0, 1]")

    def spec(self) -> dict:
        return {"kind": "bernoulli", "value": repr(float(self.p))}


@dataclass(frozen=True)
class SaturationLevel:
    label: str
    prob: float
    rule: FixedFraction | BernoulliRule


@dataclass(frozen=True)
class SaturationPolicy:
    """First-stage distribution over saturation levels, applied independently
    across clusters."""

    levels: tuple[SaturationLevel, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise ValueError("policy needs at least one level")
        total = math.fsum(lv.prob for lv in self.levels)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"level probabilities sum to {total}, not 1")
        if any(lv.prob < 0 for lv in self.levels):
            raise ValueError("level probabilities must be nonnegative")

    @property
    def digest(self) -> str:
        return stable_digest(
            [
                {"label": lv.label, "prob": repr(float(lv.prob)), "rule": lv.rule.spec()}
                for lv in self.levels
            ]
        )

    def level_probs(self) -> np.ndarray:
        return np.array([lv.prob for lv in self.levels], dtype=float)


@dataclass
class AssignmentVector:
    """Per-unit binary treatments plus realized per-cluster level labels."""

    treatment: np.ndarray
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        self.treatment = np.asarray(self.treatment, dtype=np.int8)
        if not np.isin(self.treatment, (0, 1)).all():
            raise ValueError("treatments must be binary")


def save_assignment_csv(path, network: Network, assignment: AssignmentVector) -> None:
    """Write the realized assignment as unit_id,treatment rows."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id", "treatment"])
        for uid, t in zip(network.unit_ids, assignment.treatment):
            w.writerow([uid, int(t)])


def _pick_level(policy: SaturationPolicy, u: float) -> int:
    cum = np.cumsum(policy.level_probs())
    return int(min(np.searchsorted(cum, u, side="right"), len(cum) - 1))


def sample_assignment(policy: SaturationPolicy, network: Network, seed) -> AssignmentVector:
    """Draw one assignment vector from the policy.

    ``seed`` is an int or tuple (master, draw_index, ...); each cluster's
    randomness is a pure function of (seed, cluster index), so the seed-to-
    output mapping is identical regardless of execution environment.
    """
    key = seed_key(seed)
    a = np.zeros(network.n, dtype=np.int8)
    labels = []
    for ci, members in enumerate(network.cluster_members()):
        if members.size == 0:
            raise ValueError("empty cluster")
        rng = np.random.default_rng(key + [ci])
        lv = policy.levels[_pick_level(policy, rng.random())]
        labels.append(lv.label)
        if isinstance(lv.rule, FixedFraction):
            m = lv.rule.treated_count(members.size)
            perm = rng.permutation(members.size)
            a[members[perm[:m]]] = 1
        else:
            a[members] = rng.random(members.size) < lv.rule.p
    return AssignmentVector(treatment=a, levels=tuple(labels))


def sample_assignment_batch(
    policy: SaturationPolicy, network: Network, seed, draws: int
) -> np.ndarray:
    """Draw ``draws`` independent assignment vectors as a (draws, n) int8 array.

    Each cluster's stream is a pure function of (seed, cluster index); the
    draw index selects a row of the stream, so results are bit-identical
    for fixed (seed, draws) however the draws are later consumed.
    """
    key = seed_key(seed)
    cum = np.cumsum(policy.level_probs())
    a = np.zeros((draws, network.n), dtype=np.int8)
    for ci, members in enumerate(network.cluster_members()):
        n_k = members.size
        if n_k == 0:
            raise ValueError("empty cluster")
        rng = np.random.default_rng(key + [ci])
        level_idx = np.minimum(
            np.searchsorted(cum, rng.random(draws), side="right"), len(cum) - 1
        )
        u = rng.random((draws, n_k))
        # Rank of each unit within its draw; "rank < m" is a uniform m-subset.
        ranks = np.argsort(np.argsort(u, axis=1), axis=1)
        block = np.zeros((draws, n_k), dtype=np.int8)
        for li, lv in enumerate(policy.levels):
            rows = level_idx == li
            if not rows.any():
                continue
            if isinstance(lv.rule, FixedFraction):
                m = lv.rule.treated_count(n_k)
                block[rows] = ranks[rows] < m
            else:
                block[rows] = u[rows] < lv.rule.p
        a[:, members] = block
    return a


def _cluster_support(policy: SaturationPolicy, n_k: int) -> list[tuple[tuple[int, ...], float]]:
    """Distinct within-cluster treatment tuples with their probabilities."""
    acc: dict[tuple[int, ...], float] = {}
    for lv in policy.levels:
        if isinstance(lv.rule, FixedFraction):
            m = lv.rule.treated_count(n_k)
            p_each = lv.prob / math.comb(n_k, m)
            for picked in itertools.combinations(range(n_k), m):
                vec = tuple(1 if i in picked else 0 for i in range(n_k))
                acc[vec] = acc.get(vec, 0.0) + p_each
        else:
            p = lv.rule.p
            for vec in itertools.product((0, 1), repeat=n_k):
                t = sum(vec)
                pv = lv.prob * (p**t) * ((1 - p) ** (n_k - t))
                if pv > 0.0:
                    acc[vec] = acc.get(vec, 0.0) + pv
    return sorted(acc.items())


def _cluster_support_size(policy: SaturationPolicy, n_k: int) -> int:
    counts: set[int] = set()
    for lv in policy.levels:
        if isinstance(lv.rule, FixedFraction):
            counts.add(lv.rule.treated_count(n_k))
        elif lv.rule.p == 0.0:
            counts.add(0)
        elif lv.rule.p == 1.0:
            counts.add(n_k)
        else:
            return 2**n_k
    return sum(math.comb(n_k, m) for m in counts)


def policy_hazards(policy: SaturationPolicy, network: Network) -> list[str]:
    """Flag degenerate within-cluster treated counts (0 or n_k): allowed,
    but they force exposure cells to probability zero."""
    notes = []
    for lab in network.cluster_labels:
        n_k = len(network.clusters[lab])
        for lv in policy.levels:
            if isinstance(lv.rule, FixedFraction):
                m = lv.rule.treated_count(n_k)
                if m in (0, n_k):
                    notes.append(
                        f"cluster {lab!r} (size {n_k}) level {lv.label!r}: "
                        f"treated count {m} is degenerate"
                    )
            elif lv.rule.p in (0.0, 1.0):
                notes.append(
                    f"cluster {lab!r} level {lv.label!r}: Bernoulli({lv.rule.p}) is degenerate"
                )
    return notes


def policy_support_size(policy: SaturationPolicy, network: Network) -> int:
    """Exact number of distinct assignment vectors, without materializing them."""
    size = 1
    for members in network.cluster_members():
        size *= _cluster_support_size(policy, members.size)
    return size


def enumerate_assignments(
    policy: SaturationPolicy, network: Network, cap: int = ENUMERATION_CAP
) -> list[tuple[np.ndarray, float]]:
    """Materialize the full assignment support with probabilities.

    Every distinct vector appears exactly once; probabilities sum to one.
    Refuses if the support exceeds ``cap``.
    """
    size = policy_support_size(policy, network)
    if size > cap:
        raise SupportTooLargeError(
            f"assignment support has {size} vectors, above the cap of {cap}"
        )
    member_arrays = network.cluster_members()
    supports = [_cluster_support(policy, members.size) for members in member_arrays]
    out: list[tuple[np.ndarray, float]] = []
    for combo in itertools.product(*supports):
        a = np.zeros(network.n, dtype=np.int8)
        prob = 1.0
        for members, (vec, p) in zip(member_arrays, combo):
            a[members] = vec
            prob *= p
        out.append((a, prob))
    return out
