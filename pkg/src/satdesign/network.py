"""Interference network construction.

Builds cluster membership and directed geographic nearest-neighbor sets from
unit records, and derives the symmetrized m-hop dependency graph that bounds
which unit pairs can have dependent exposures.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ._common import SchemaError, stable_digest

__all__ = [
    "UnitRecord",
    "Network",
    "DependencyGraph",
    "DegreeReport",
    "build_network",
    "dependency_graph",
    "degree_diagnostics",
    "read_units_csv",
    "read_distance_csv",
]


@dataclass(frozen=True)
class UnitRecord:
    """One experimental unit: identity, cluster, location, optional data."""

    unit_id: str
    cluster_id: str
    x_km: float | None = None
    y_km: float | None = None
    treatment: int | None = None
    outcome: float | None = None
    covariates: tuple[float, ...] | None = None


@dataclass
class Network:
    """Cluster partition plus directed geographic neighbor sets.

    Units are indexed by their position in ``unit_ids``; ``geo_neighbors[i]``
    lists cross-cluster neighbors of unit i sorted by ascending distance (ties
    by unit id). The neighbor relation is directed: j in G_i does not imply
    i in G_j. Immutable after construction.
    """

    unit_ids: tuple[str, ...]
    cluster_ids: tuple[str, ...]
    clusters: dict[str, tuple[int, ...]]
    geo_neighbors: tuple[tuple[int, ...], ...]
    threshold_km: float
    k_max: int
    cluster_labels: tuple[str, ...] = field(default=())
    cluster_of: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.unit_ids)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    def index_of(self, unit_id: str) -> int:
        try:
            return self._index[unit_id]
        except AttributeError:
            self._index = {u: i for i, u in enumerate(self.unit_ids)}
            return self._index[unit_id]

    def cluster_members(self) -> list[np.ndarray]:
        """Member index arrays per cluster, in cluster_labels order."""
        return [np.asarray(self.clusters[lab], dtype=np.intp) for lab in self.cluster_labels]

    def peer_counts(self) -> np.ndarray:
        """Number of same-cluster peers per unit (cluster size minus one)."""
        sizes = np.array([len(self.clusters[lab]) for lab in self.cluster_labels])
        return sizes[self.cluster_of] - 1

    def geo_counts(self) -> np.ndarray:
        return np.array([len(g) for g in self.geo_neighbors], dtype=np.intp)

    @property
    def digest(self) -> str:
        return stable_digest(
            {
                "units": list(self.unit_ids),
                "clusters": list(self.cluster_ids),
                "geo": [[self.unit_ids[j] for j in g] for g in self.geo_neighbors],
                "threshold_km": repr(float(self.threshold_km)),
                "k_max": int(self.k_max),
            }
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "build_params": {"threshold_km": self.threshold_km, "k_max": self.k_max},
            "clusters": {
                lab: [self.unit_ids[i] for i in self.clusters[lab]] for lab in self.cluster_labels
            },
            "geo_neighbors": {
                self.unit_ids[i]: [self.unit_ids[j] for j in g]
                for i, g in enumerate(self.geo_neighbors)
            },
            "digest": self.digest,
        }


def _pairwise_distances(units: list[UnitRecord]) -> np.ndarray:
    xy = np.array([[u.x_km, u.y_km] for u in units], dtype=float)
    diff = xy[:, None, :] - xy[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def build_network(
    units: list[UnitRecord],
    threshold_km: float,
    k_max: int,
    distances: dict[tuple[str, str], float] | None = None,
) -> Network:
    """Build the geographic interference network.

    Each unit gets up to ``k_max`` nearest cross-cluster neighbors within
    ``threshold_km``. Distances come from planar coordinates unless a
    distance table is supplied, in which case the table is used exclusively
    (it must cover every cross-cluster pair). Deterministic: ties at the
    threshold are included, ties in the k-nearest cut break by unit id.
    """
    if threshold_km <= 0:
        raise SchemaError("threshold_km must be positive")
    if k_max < 0:
        raise SchemaError("k_max must be nonnegative")
    ids = [u.unit_id for u in units]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise SchemaError(f"duplicate unit_id(s): {dupes}")
    if not units:
        raise SchemaError("no units supplied")

    n = len(units)
    cluster_labels: list[str] = []
    label_pos: dict[str, int] = {}
    cluster_of = np.empty(n, dtype=np.intp)
    clusters: dict[str, list[int]] = {}
    for i, u in enumerate(units):
        if u.cluster_id not in clusters:
            clusters[u.cluster_id] = []
            label_pos[u.cluster_id] = len(cluster_labels)
            cluster_labels.append(u.cluster_id)
        clusters[u.cluster_id].append(i)
        cluster_of[i] = label_pos[u.cluster_id]

    if distances is None:
        missing = [u.unit_id for u in units if u.x_km is None or u.y_km is None]
        if missing:
            raise SchemaError(f"missing coordinates for unit(s): {missing}")
        dist = _pairwise_distances(units)
    else:
        index = {u: i for i, u in enumerate(ids)}
        dist = np.full((n, n), np.inf)
        np.fill_diagonal(dist, 0.0)
        for (a, b), d in distances.items():
            if a not in index or b not in index:
                continue
            ia, ib = index[a], index[b]
            dist[ia, ib] = d
            dist[ib, ia] = d
        for i in range(n):
            for j in range(i + 1, n):
                if cluster_of[i] != cluster_of[j] and not np.isfinite(dist[i, j]):
                    raise SchemaError(
                        f"distance table missing cross-cluster pair ({ids[i]}, {ids[j]})"
                    )

    geo: list[tuple[int, ...]] = []
    if k_max == 0:
        geo = [() for _ in range(n)]
    else:
        for i in range(n):
            cand = [
                j
                for j in range(n)
                if j != i and cluster_of[j] != cluster_of[i] and dist[i, j] <= threshold_km
            ]
            cand.sort(key=lambda j: (dist[i, j], ids[j]))
            geo.append(tuple(cand[:k_max]))

    return Network(
        unit_ids=tuple(ids),
        cluster_ids=tuple(u.cluster_id for u in units),
        clusters={lab: tuple(members) for lab, members in clusters.items()},
        geo_neighbors=tuple(geo),
        threshold_km=float(threshold_km),
        k_max=int(k_max),
        cluster_labels=tuple(cluster_labels),
        cluster_of=cluster_of,
    )


@dataclass
class DependencyGraph:
    """Symmetrized interference adjacency and its m-hop closure.

    ``base`` links same-cluster pairs and geo-neighbor pairs (either
    direction) plus self-loops; ``closure[i, j]`` is true iff a path of
    length at most m connects i and j in base. ``max_degree`` is the largest
    closure neighborhood size excluding the unit itself.
    """

    base: sp.csr_matrix
    m: int
    closure: sp.csr_matrix
    max_degree: int
    network: Network

    def closure_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Upper-triangle (i < j) dependent pairs of the closure."""
        coo = sp.triu(self.closure, k=1).tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order].astype(np.intp), coo.col[order].astype(np.intp)

    def degrees(self) -> np.ndarray:
        return np.asarray(self.closure.sum(axis=1)).ravel().astype(int) - 1


def dependency_graph(network: Network, m: int) -> DependencyGraph:
    """m-th relational power of the symmetrized interference adjacency."""
    if m < 1:
        raise ValueError("m must be at least 1")
    n = network.n
    rows: list[int] = []
    cols: list[int] = []
    for lab in network.cluster_labels:
        members = network.clusters[lab]
        for i in members:
            for j in members:
                rows.append(i)
                cols.append(j)
    for i, g in enumerate(network.geo_neighbors):
        for j in g:
            rows.extend((i, j))
            cols.extend((j, i))
    data = np.ones(len(rows), dtype=bool)
    base = sp.csr_matrix((data, (rows, cols)), shape=(n, n), dtype=bool)
    base.setdiag(True)
    base.sum_duplicates()

    closure = base.copy()
    for _ in range(m - 1):
        closure = ((closure @ base) > 0).tocsr()
    max_degree = int((np.asarray(closure.sum(axis=1)).ravel() - 1).max()) if n else 0
    return DependencyGraph(base=base, m=m, closure=closure, max_degree=max_degree, network=network)


@dataclass
class DegreeReport:
    """Read-only degree diagnostics for a dependency graph."""

    max_degree: int
    histogram: dict[int, int]
    isolated_units: tuple[str, ...]
    empty_geo_units: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "max_degree": self.max_degree,
            "degree_histogram": {str(k): v for k, v in sorted(self.histogram.items())},
            "isolated_units": list(self.isolated_units),
            "empty_geo_units": list(self.empty_geo_units),
        }


def degree_diagnostics(graph: DependencyGraph) -> DegreeReport:
    """Summarize closure degrees and flag units with no geographic neighbors.

    Units with empty G_i matter downstream: their between-cluster exposure is
    pinned to the configured convention value.
    """
    deg = graph.degrees()
    hist: dict[int, int] = {}
    for d in deg:
        hist[int(d)] = hist.get(int(d), 0) + 1
    ids = graph.network.unit_ids
    isolated = tuple(ids[i] for i in range(len(ids)) if deg[i] == 0)
    empty_geo = tuple(
        ids[i] for i, g in enumerate(graph.network.geo_neighbors) if len(g) == 0
    )
    return DegreeReport(
        max_degree=graph.max_degree,
        histogram=hist,
        isolated_units=isolated,
        empty_geo_units=empty_geo,
    )


_RESERVED_COLUMNS = {"unit_id", "cluster_id", "x_km", "y_km", "treatment", "outcome"}


def read_units_csv(path, outcome_col: str = "outcome", reserved_extra=()) -> list[UnitRecord]:
    """Read units from CSV with columns unit_id, cluster_id, x_km, y_km,
    [treatment], [outcome], [x1..xp]. Unreserved columns become covariates
    in file order; ``reserved_extra`` names further non-covariate columns
    (e.g. alternative outcome columns)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty CSV")
        fields = list(reader.fieldnames)
        for col in ("unit_id", "cluster_id"):
            if col not in fields:
                raise SchemaError(f"{path}: missing required column {col!r}")
        skip = _RESERVED_COLUMNS | set(reserved_extra) | {outcome_col}
        covar_cols = [c for c in fields if c not in skip]
        units = []
        for row in reader:
            def fval(col):
                v = row.get(col)
                return float(v) if v not in (None, "") else None

            tr = row.get("treatment")
            cov = tuple(float(row[c]) for c in covar_cols) if covar_cols else None
            units.append(
                UnitRecord(
                    unit_id=row["unit_id"],
                    cluster_id=row["cluster_id"],
                    x_km=fval("x_km"),
                    y_km=fval("y_km"),
                    treatment=int(tr) if tr not in (None, "") else None,
                    outcome=fval(outcome_col),
                    covariates=cov,
                )
            )
    if not units:
        raise SchemaError(f"{path}: no unit rows")
    return units


def read_distance_csv(path) -> dict[tuple[str, str], float]:
    """Read a unit_i,unit_j,dist_km table; symmetric completion is applied
    by build_network."""
    table: dict[tuple[str, str], float] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for col in ("unit_i", "unit_j", "dist_km"):
            if reader.fieldnames is None or col not in reader.fieldnames:
                raise SchemaError(f"{path}: missing required column {col!r}")
        for row in reader:
            table[(row["unit_i"], row["unit_j"])] = float(row["dist_km"])
    return table
