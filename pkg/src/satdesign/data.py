"""Observed-data container binding outcomes to realized exposures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import AssignmentVector
from .exposure import ExposureConfig, ExposureMatrix, compute_exposures
from .network import Network

__all__ = ["ObservedData", "design_matrix"]


@dataclass
class ObservedData:
    """Outcomes and realized exposures for one assignment draw.

    Carries the network/exposure digests it was computed under so that
    estimators can refuse tables built for a different configuration.
    """

    unit_ids: tuple[str, ...]
    y: np.ndarray
    exposures: ExposureMatrix
    x: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.shape[0] != self.exposures.n:
            raise ValueError("outcome length does not match exposures")
        if self.x is not None:
            self.x = np.asarray(self.x, dtype=float)
            if self.x.ndim == 1:
                self.x = self.x[:, None]
            if self.x.shape[0] != self.exposures.n:
                raise ValueError("covariate rows do not match exposures")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def context_key(self) -> tuple:
        return (self.exposures.config_digest, self.exposures.network_digest, self.unit_ids)

    def subset(self, idx: np.ndarray) -> "ObservedData":
        idx = np.asarray(idx, dtype=np.intp)
        return ObservedData(
            unit_ids=tuple(self.unit_ids[i] for i in idx),
            y=self.y[idx].copy(),
            exposures=self.exposures.subset(idx),
            x=None if self.x is None else self.x[idx].copy(),
        )


def observe(
    network: Network,
    assignment: AssignmentVector,
    cfg: ExposureConfig,
    y: np.ndarray,
    x: np.ndarray | None = None,
) -> ObservedData:
    """Build ObservedData by computing exposures from a realized assignment."""
    expo = compute_exposures(assignment, network, cfg)
    return ObservedData(unit_ids=network.unit_ids, y=y, exposures=expo, x=x)


def design_matrix(data: ObservedData) -> np.ndarray:
    """Constant column plus full-sample-centered covariates."""
    n = data.n
    if data.x is None or data.x.shape[1] == 0:
        return np.ones((n, 1))
    centered = data.x - data.x.mean(axis=0, keepdims=True)
    return np.column_stack([np.ones(n), centered])
