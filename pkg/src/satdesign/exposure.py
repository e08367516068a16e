"""Exposure mapping from an assignment vector to per-unit cells.

A unit's exposure is (own treatment, within-cluster flag, between-cluster
flag). The within flag turns on when the treated share of same-cluster peers
strictly exceeds the cutoff; the between flag does the same over the unit's
geographic neighbor set. Comparisons are exact rational arithmetic so that
cutoffs like 1/3 and 2/3 never hit floating-point ties. Reduced mode drops
the between-cluster coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.sparse as sp

from ._common import as_fraction, stable_digest
from .design import AssignmentVector
from .network import Network

__all__ = [
    "ExposureConfig",
    "ExposureMatrix",
    "compute_exposures",
    "batch_cell_codes",
    "cell_counts",
    "cell_index",
    "all_levels",
]


@dataclass(frozen=True)
class ExposureConfig:
    """Cutoff and conventions for the exposure mapping.

    ``empty_within`` / ``empty_between`` give the flag value when a unit has
    no same-cluster peers / no geographic neighbors; such units are marked
    degenerate rather than erroring.
    """

    cutoff: Fraction = Fraction(1, 2)
    empty_within: int = 0
    empty_between: int = 0
    mode: str = "full"

    def __post_init__(self):
        c = as_fraction(self.cutoff)
        object.__setattr__(self, "cutoff", c)
        if not 0 < c < 1:
            raise ValueError("cutoff must lie strictly between 0 and 1")
        if self.empty_within not in (0, 1) or self.empty_between not in (0, 1):
            raise ValueError("degenerate-denominator conventions must be 0 or 1")
        if self.mode not in ("full", "reduced"):
            raise ValueError("mode must be 'full' or 'reduced'")

    @property
    def n_cells(self) -> int:
        return 8 if self.mode == "full" else 4

    @property
    def digest(self) -> str:
        return stable_digest(
            {
                "cutoff": str(self.cutoff),
                "empty_within": self.empty_within,
                "empty_between": self.empty_between,
                "mode": self.mode,
            }
        )


def all_levels(mode: str = "full") -> list[tuple[int, ...]]:
    """Exposure cells in index order: (a,s,h) for full, (a,s) for reduced."""
    if mode == "full":
        return [(a, s, h) for a in (0, 1) for s in (0, 1) for h in (0, 1)]
    return [(a, s) for a in (0, 1) for s in (0, 1)]


def cell_index(level: tuple[int, ...], mode: str = "full") -> int:
    if mode == "full":
        a, s, h = level
        return a * 4 + s * 2 + h
    a, s = level
    return a * 2 + s


@dataclass
class ExposureMatrix:
    """Realized exposure coordinates plus degenerate-denominator flags."""

    a: np.ndarray
    s: np.ndarray
    h: np.ndarray | None
    within_degenerate: np.ndarray
    between_degenerate: np.ndarray
    mode: str = "full"
    config_digest: str = ""
    network_digest: str = ""

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def n_cells(self) -> int:
        return 8 if self.mode == "full" else 4

    def cell_codes(self) -> np.ndarray:
        if self.mode == "full":
            return (self.a * 4 + self.s * 2 + self.h).astype(np.uint8)
        return (self.a * 2 + self.s).astype(np.uint8)

    def level_indicator(self, level: tuple[int, ...]) -> np.ndarray:
        return self.cell_codes() == cell_index(level, self.mode)

    def subset(self, idx: np.ndarray) -> "ExposureMatrix":
        return ExposureMatrix(
            a=self.a[idx],
            s=self.s[idx],
            h=None if self.h is None else self.h[idx],
            within_degenerate=self.within_degenerate[idx],
            between_degenerate=self.between_degenerate[idx],
            mode=self.mode,
            config_digest=self.config_digest,
            network_digest=self.network_digest,
        )


def _threshold_flags(
    treated: np.ndarray, totals: np.ndarray, cutoff: Fraction, convention: int
) -> tuple[np.ndarray, np.ndarray]:
    """Flag = 1{treated/totals > cutoff} by integer cross-multiplication;
    zero denominators get the convention value and a degeneracy mark."""
    num, den = cutoff.numerator, cutoff.denominator
    degenerate = totals == 0
    flags = (den * treated.astype(np.int64)) > (num * totals.astype(np.int64))
    flags = flags.astype(np.int8)
    if degenerate.any():
        flags = np.where(degenerate, np.int8(convention), flags)
    return flags, degenerate


def compute_exposures(
    assignment: AssignmentVector, network: Network, cfg: ExposureConfig
) -> ExposureMatrix:
    """Map one assignment vector to per-unit exposure coordinates."""
    a = np.asarray(assignment.treatment, dtype=np.int8)
    if a.shape[0] != network.n:
        raise ValueError("assignment length does not match network")

    cluster_treated = np.bincount(
        network.cluster_of, weights=a, minlength=network.n_clusters
    ).astype(np.int64)
    peers = network.peer_counts()
    treated_peers = cluster_treated[network.cluster_of] - a
    s, within_deg = _threshold_flags(treated_peers, peers, cfg.cutoff, cfg.empty_within)

    if cfg.mode == "reduced":
        geo_counts = network.geo_counts()
        return ExposureMatrix(
            a=a,
            s=s,
            h=None,
            within_degenerate=within_deg,
            between_degenerate=geo_counts == 0,
            mode="reduced",
            config_digest=cfg.digest,
            network_digest=network.digest,
        )

    geo_counts = network.geo_counts()
    treated_geo = np.zeros(network.n, dtype=np.int64)
    for i, g in enumerate(network.geo_neighbors):
        if g:
            treated_geo[i] = int(a[list(g)].sum())
    h, between_deg = _threshold_flags(treated_geo, geo_counts, cfg.cutoff, cfg.empty_between)
    return ExposureMatrix(
        a=a,
        s=s,
        h=h,
        within_degenerate=within_deg,
        between_degenerate=between_deg,
        mode="full",
        config_digest=cfg.digest,
        network_digest=network.digest,
    )


@dataclass
class _BatchMats:
    """Sparse helpers reused across Monte Carlo chunks."""

    cluster_onehot: sp.csr_matrix  # (K, n)
    geo: sp.csr_matrix | None  # (n, n), row i marks G_i
    peers: np.ndarray
    geo_counts: np.ndarray


def _batch_mats(network: Network) -> _BatchMats:
    n = network.n
    onehot = sp.csr_matrix(
        (np.ones(n), (network.cluster_of, np.arange(n))),
        shape=(network.n_clusters, n),
    )
    rows, cols = [], []
    for i, g in enumerate(network.geo_neighbors):
        rows.extend([i] * len(g))
        cols.extend(g)
    geo = None
    if rows:
        geo = sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(n, n)
        )
    return _BatchMats(
        cluster_onehot=onehot,
        geo=geo,
        peers=network.peer_counts(),
        geo_counts=network.geo_counts(),
    )


def batch_cell_codes(
    treatments: np.ndarray,
    network: Network,
    cfg: ExposureConfig,
    mats: _BatchMats | None = None,
) -> np.ndarray:
    """Exposure cell codes for a (draws, n) treatment matrix, vectorized."""
    if mats is None:
        mats = _batch_mats(network)
    a = treatments
    num, den = cfg.cutoff.numerator, cfg.cutoff.denominator

    cluster_treated = (mats.cluster_onehot @ a.T.astype(np.int64)).T  # (B, K)
    treated_peers = cluster_treated[:, network.cluster_of] - a
    s = (den * treated_peers) > (num * mats.peers[None, :])
    if (mats.peers == 0).any():
        s = np.where(mats.peers[None, :] == 0, bool(cfg.empty_within), s)

    if cfg.mode == "reduced":
        return (a * 2 + s).astype(np.uint8)

    if mats.geo is not None:
        treated_geo = (mats.geo @ a.T.astype(np.int64)).T
    else:
        treated_geo = np.zeros_like(a, dtype=np.int64)
    h = (den * treated_geo) > (num * mats.geo_counts[None, :])
    if (mats.geo_counts == 0).any():
        h = np.where(mats.geo_counts[None, :] == 0, bool(cfg.empty_between), h)
    return (a * 4 + s * 2 + h).astype(np.uint8)


def cell_counts(exposures: ExposureMatrix) -> dict[tuple[int, ...], int]:
    """Tabulate unit counts per exposure cell; counts sum to n."""
    codes = exposures.cell_codes()
    counts = np.bincount(codes, minlength=exposures.n_cells)
    return {lvl: int(counts[cell_index(lvl, exposures.mode)]) for lvl in all_levels(exposures.mode)}


def save_exposures_csv(path, unit_ids, exposures: ExposureMatrix) -> None:
    """Write realized exposures: unit_id,a,s[,h],within_degenerate,between_degenerate."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["unit_id", "a", "s"] + (["h"] if exposures.mode == "full" else [])
        w.writerow(cols + ["within_degenerate", "between_degenerate"])
        for i, uid in enumerate(unit_ids):
            row = [uid, int(exposures.a[i]), int(exposures.s[i])]
            if exposures.mode == "full":
                row.append(int(exposures.h[i]))
            row += [int(exposures.within_degenerate[i]), int(exposures.between_degenerate[i])]
            w.writerow(row)
