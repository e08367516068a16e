"""Variance machinery for the design-based estimators.

Oracle side: exact quadratic-form variances and covariances of the weighted
inverse-probability cell means, computed from a full potential-outcome table
and exact inclusion probabilities. Observable side: the pair-reweighted
estimator that uses only observed outcomes, with a conservative additive
correction for pairs whose same-cell joint probability is zero, plus the
Cauchy-Schwarz composition for contrast variances and normal-quantile
confidence intervals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from ._common import EmptyCellError, PositivityError
from .data import ObservedData, design_matrix
from .exposure import cell_index
from .inclusion import InclusionTable, WeightScheme

__all__ = [
    "VarianceEstimate",
    "LambdaOperators",
    "OmegaOperator",
    "build_lambda",
    "build_omega",
    "oracle_avar",
    "oracle_acov",
    "estimate_variance_cell",
    "conservative_contrast_variance",
    "confidence_interval",
    "ca_variance",
]


@dataclass
class VarianceEstimate:
    """A variance value with provenance flags."""

    target: str
    value: float
    method: str
    corrected: bool = False
    floored: bool = False
    zero_pairs: int = 0

    @property
    def se(self) -> float:
        return float(np.sqrt(max(self.value, 0.0)))


@dataclass
class LambdaOperators:
    """Sparse single-level dependence operator.

    Diagonal (1 - pi_i)/pi_i over units with pi_i > 0; off-diagonal
    (pi_ij - pi_i pi_j)/(pi_i pi_j) on dependency-adjacent pairs. Entries
    for pairs outside the stored set are exactly zero by independence.
    """

    level: tuple[int, ...]
    diag: np.ndarray
    pair_i: np.ndarray
    pair_j: np.ndarray
    pair_vals: np.ndarray
    positive: np.ndarray = field(repr=False, default=None)

    def to_dense(self) -> np.ndarray:
        n = len(self.diag)
        out = np.diag(self.diag)
        for i, j, v in zip(self.pair_i, self.pair_j, self.pair_vals):
            out[i, j] = v
            out[j, i] = v
        return out


def build_lambda(inclusion: InclusionTable, level: tuple[int, ...]) -> LambdaOperators:
    c = cell_index(level, inclusion.mode)
    pi = inclusion.first_order[:, c]
    positive = pi > 0
    diag = np.zeros_like(pi)
    diag[positive] = (1.0 - pi[positive]) / pi[positive]
    pij = inclusion.pair_probs_at(level)
    pi_i = pi[inclusion.pair_i]
    pi_j = pi[inclusion.pair_j]
    both = (pi_i > 0) & (pi_j > 0)
    vals = np.zeros_like(pij)
    vals[both] = (pij[both] - pi_i[both] * pi_j[both]) / (pi_i[both] * pi_j[both])
    return LambdaOperators(
        level=level,
        diag=diag,
        pair_i=inclusion.pair_i,
        pair_j=inclusion.pair_j,
        pair_vals=vals,
        positive=positive,
    )


@dataclass
class OmegaOperator:
    """Observable reweighting of the dependence operator at one level.

    Off-diagonal entries (pi_ij - pi_i pi_j)/pi_ij exist only where
    pi_ij > 0; pairs with positive marginals but zero joint go to
    ``zero_pair`` and are handled by the conservative correction.
    """

    level: tuple[int, ...]
    pi: np.ndarray
    diag: np.ndarray
    pair_i: np.ndarray
    pair_j: np.ndarray
    pair_vals: np.ndarray
    zero_pair: np.ndarray

    def to_dense(self) -> np.ndarray:
        out = np.diag(self.diag)
        for i, j, v in zip(self.pair_i, self.pair_j, self.pair_vals):
            out[i, j] = v
            out[j, i] = v
        return out


def build_omega(inclusion: InclusionTable, level: tuple[int, ...]) -> OmegaOperator:
    c = cell_index(level, inclusion.mode)
    pi = inclusion.first_order[:, c]
    diag = np.where(pi > 0, 1.0 - pi, 0.0)
    pij = inclusion.pair_probs_at(level)
    pi_i = pi[inclusion.pair_i]
    pi_j = pi[inclusion.pair_j]
    ok = pij > 0
    vals = np.zeros_like(pij)
    vals[ok] = (pij[ok] - pi_i[ok] * pi_j[ok]) / pij[ok]
    zero_pair = (~ok) & (pi_i > 0) & (pi_j > 0)
    return OmegaOperator(
        level=level,
        pi=pi,
        diag=diag,
        pair_i=inclusion.pair_i,
        pair_j=inclusion.pair_j,
        pair_vals=vals,
        zero_pair=zero_pair,
    )


def _po_column(po_values: np.ndarray, inclusion: InclusionTable, level) -> np.ndarray:
    return po_values[:, cell_index(level, inclusion.mode)]


def _gamma_at(gamma: WeightScheme | None, level, n: int, mode: str) -> np.ndarray:
    if gamma is None:
        return np.ones(n)
    return gamma.gamma[:, cell_index(level, mode)]


def _centered(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    gsum = g.sum()
    if gsum == 0:
        raise EmptyCellError("all weights are zero; centered outcomes undefined")
    return y - (g @ y) / gsum


def oracle_avar(
    po_values: np.ndarray,
    inclusion: InclusionTable,
    level: tuple[int, ...],
    gamma: WeightScheme | None = None,
    kind: str = "ht",
) -> VarianceEstimate:
    """Exact design variance of the weighted cell-mean estimator.

    Requires a full potential-outcome table (oracle/simulation use only).
    Units with zero inclusion probability never contribute to the estimator
    and are excluded from the quadratic form. For the ratio estimator the
    outcomes are centered at the weighted population mean first.
    """
    lam = build_lambda(inclusion, level)
    g = _gamma_at(gamma, level, inclusion.n, inclusion.mode)
    y = _po_column(po_values, inclusion, level).astype(float)
    if kind == "haj":
        y = _centered(y, g)
    elif kind != "ht":
        raise ValueError("kind must be 'ht' or 'haj'")
    gy = g * y
    total = float(lam.diag @ (gy**2))
    total += 2.0 * float((lam.pair_vals * gy[lam.pair_i] * gy[lam.pair_j]).sum())
    return VarianceEstimate(
        target=f"cell{tuple(level)}", value=total / inclusion.n**2, method="oracle-avar"
    )


def oracle_acov(
    po_values: np.ndarray,
    inclusion: InclusionTable,
    level1: tuple[int, ...],
    level2: tuple[int, ...],
    gamma1: WeightScheme | None = None,
    gamma2: WeightScheme | None = None,
    kind: str = "ht",
) -> float:
    """Exact design covariance between cell-mean estimators at two levels.

    The same-unit block contributes -1 times the product of weighted
    outcomes because one unit can never occupy two cells at once.
    """
    c1 = cell_index(level1, inclusion.mode)
    c2 = cell_index(level2, inclusion.mode)
    pi1 = inclusion.first_order[:, c1]
    pi2 = inclusion.first_order[:, c2]
    g1 = _gamma_at(gamma1, level1, inclusion.n, inclusion.mode)
    g2 = _gamma_at(gamma2, level2, inclusion.n, inclusion.mode)
    y1 = _po_column(po_values, inclusion, level1).astype(float)
    y2 = _po_column(po_values, inclusion, level2).astype(float)
    if kind == "haj":
        y1 = _centered(y1, g1)
        y2 = _centered(y2, g2)
    gy1 = g1 * y1
    gy2 = g2 * y2

    both = (pi1 > 0) & (pi2 > 0)
    total = -float((gy1 * gy2)[both].sum())
    if inclusion.second_order is None:
        raise ValueError("second-order probabilities were not estimated")
    pij_12 = inclusion.second_order[:, c1, c2]  # i at level1, j at level2
    pij_21 = inclusion.second_order[:, c2, c1]  # i at level2, j at level1
    ii, jj = inclusion.pair_i, inclusion.pair_j
    ok_ij = (pi1[ii] > 0) & (pi2[jj] > 0)
    ok_ji = (pi1[jj] > 0) & (pi2[ii] > 0)
    term_ij = np.zeros_like(pij_12)
    term_ij[ok_ij] = (
        (pij_12[ok_ij] - pi1[ii][ok_ij] * pi2[jj][ok_ij])
        / (pi1[ii][ok_ij] * pi2[jj][ok_ij])
        * gy1[ii][ok_ij]
        * gy2[jj][ok_ij]
    )
    term_ji = np.zeros_like(pij_21)
    term_ji[ok_ji] = (
        (pij_21[ok_ji] - pi1[jj][ok_ji] * pi2[ii][ok_ji])
        / (pi1[jj][ok_ji] * pi2[ii][ok_ji])
        * gy1[jj][ok_ji]
        * gy2[ii][ok_ji]
    )
    total += float(term_ij.sum() + term_ji.sum())
    return total / inclusion.n**2


def estimate_variance_cell(
    data: ObservedData,
    inclusion: InclusionTable,
    level: tuple[int, ...],
    gamma: WeightScheme | None = None,
    kind: str = "ht",
    omega: OmegaOperator | None = None,
) -> VarianceEstimate:
    """Observable variance estimate for one cell-mean estimator.

    Pairs with zero same-cell joint probability get the additive bound
    (observed squared terms over twice their marginals, applied in both
    ordered directions), which keeps the estimate conservative; the result
    is floored at zero when Monte Carlo noise drives the quadratic form
    negative.
    """
    inclusion.check_context(data.context_key(), "observed data")
    if omega is None:
        omega = build_omega(inclusion, level)
    c = cell_index(level, inclusion.mode)
    ind = (data.exposures.cell_codes() == c).astype(float)
    pi = omega.pi
    bad = (ind > 0) & (pi <= 0)
    if bad.any():
        uid = data.unit_ids[int(np.nonzero(bad)[0][0])]
        raise PositivityError(
            f"unit {uid!r} observed at cell {tuple(level)} with zero inclusion probability"
        )
    g = _gamma_at(gamma, level, inclusion.n, inclusion.mode)
    safe_pi = np.where(pi > 0, pi, 1.0)
    if kind == "ht":
        yhat = ind * data.y / safe_pi
    elif kind == "haj":
        denom = float((ind * g / safe_pi).sum())
        if denom <= 0:
            raise EmptyCellError(f"no observed weight at cell {tuple(level)}")
        ratio = float((ind * g * data.y / safe_pi).sum()) / denom
        yhat = ind * (data.y - ratio) / safe_pi
    else:
        raise ValueError("kind must be 'ht' or 'haj'")
    gv = g * yhat

    quad = float(omega.diag @ (gv**2))
    quad += 2.0 * float(
        (omega.pair_vals * gv[omega.pair_i] * gv[omega.pair_j]).sum()
    )
    correction = 0.0
    n_zero = int(omega.zero_pair.sum())
    if n_zero:
        zi = omega.pair_i[omega.zero_pair]
        zj = omega.pair_j[omega.zero_pair]
        correction = float(
            (gv[zi] ** 2 * pi[zi]).sum() + (gv[zj] ** 2 * pi[zj]).sum()
        )
    raw = (quad + correction) / inclusion.n**2
    floored = raw < 0
    return VarianceEstimate(
        target=f"cell{tuple(level)}",
        value=max(raw, 0.0),
        method="omega",
        corrected=correction > 0,
        floored=bool(floored),
        zero_pairs=n_zero,
    )


def conservative_contrast_variance(
    se_components: list[tuple[float, float]],
) -> VarianceEstimate:
    """Upper-bound variance for a weighted combination of cell means:
    square of the absolute-weighted sum of component standard errors."""
    if any(se < 0 for _, se in se_components):
        raise ValueError("standard errors must be nonnegative")
    total = sum(abs(w) * se for w, se in se_components)
    return VarianceEstimate(target="contrast", value=total**2, method="cauchy-schwarz")


def confidence_interval(point: float, variance: float, alpha: float) -> tuple[float, float]:
    """Normal-quantile interval: point plus/minus z_{alpha/2} * sqrt(variance)."""
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    z = norm.ppf(1.0 - alpha / 2.0)
    half = z * np.sqrt(variance)
    return (float(point - half), float(point + half))


def ca_variance(
    data: ObservedData,
    inclusion: InclusionTable,
    level: tuple[int, ...],
    beta: np.ndarray,
    omega: OmegaOperator | None = None,
) -> VarianceEstimate:
    """Variance for the regression-adjusted cell mean via pseudo-outcomes.

    Applies the cell variance estimator to residuals from the fitted
    adjustment; contrasts then compose by Cauchy-Schwarz. Heuristic (the
    adjustment's estimation error is ignored), flagged in the method name.
    """
    xmat = design_matrix(data)
    pseudo = ObservedData(
        unit_ids=data.unit_ids,
        y=data.y - xmat @ np.asarray(beta, dtype=float),
        exposures=data.exposures,
        x=None,
    )
    est = estimate_variance_cell(pseudo, inclusion, level, kind="ht", omega=omega)
    est.method = "omega-ca-heuristic"
    return est
