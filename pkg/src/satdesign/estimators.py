"""Inverse-probability-weighted estimators for cell means and effects.

Cell means come in three kinds: the unbiased weighted mean ("ht"), the
ratio-normalized mean ("haj"), and the regression-adjusted mean ("ca").
Effects are contrasts of cell means; policy-specific effects reweight each
cell by the conditional exposure probabilities of a target policy before
contrasting. Standard errors compose cell-level variance estimates through
the conservative absolute-weighted bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._common import DigestError, EmptyCellError, PositivityError
from .data import ObservedData, design_matrix
from .exposure import cell_index
from .inclusion import InclusionTable, WeightScheme
from .variance import (
    VarianceEstimate,
    build_omega,
    ca_variance,
    confidence_interval,
    conservative_contrast_variance,
    estimate_variance_cell,
)

__all__ = [
    "CellMeanEstimate",
    "EffectEstimate",
    "ContrastSpec",
    "ht_cell_mean",
    "hajek_cell_mean",
    "covariate_adjusted_cell_mean",
    "conditional_effects",
    "wie_variants_holding_treated",
    "policy_effects",
    "estimate_effects",
    "de_contrast",
    "wie_contrast",
    "bie_contrast",
    "default_conditional_contrasts",
]


@dataclass
class CellMeanEstimate:
    """Estimated average potential outcome at one exposure cell."""

    level: tuple[int, ...]
    estimator: str
    value: float
    count: int
    weight_sum: float
    gamma_kind: str | None = None
    flags: tuple[str, ...] = ()
    beta: np.ndarray | None = None

    @property
    def empty(self) -> bool:
        return "empty_cell" in self.flags


@dataclass
class EffectEstimate:
    """A contrast of cell means with its conservative interval."""

    estimand: str
    estimator: str
    value: float
    se: float
    ci_lo: float
    ci_hi: float
    alpha: float
    status: str = "ok"
    flags: tuple[str, ...] = ()
    components: dict = field(default_factory=dict)
    component_se: dict = field(default_factory=dict)
    variance: VarianceEstimate | None = None

    def detail(self) -> dict:
        """Per-estimand variance detail: cell components with their SEs."""
        out = {}
        for key, est in self.components.items():
            entry = {"se": self.component_se.get(key)}
            if est is not None:
                entry.update(
                    {"value": est.value, "count": est.count, "flags": list(est.flags)}
                )
            out[key] = entry
        return out

    def to_row(self) -> dict:
        return {
            "estimand": self.estimand,
            "estimator": self.estimator,
            "point": self.value,
            "se": self.se,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "status": self.status,
            "flags": ";".join(self.flags),
        }


def _check_context(data: ObservedData, inclusion: InclusionTable) -> None:
    inclusion.check_context(data.context_key(), "observed data")


def _check_weights(gamma: WeightScheme | None, inclusion: InclusionTable) -> None:
    if gamma is None:
        return
    if gamma.context_key() != inclusion.context_key():
        raise DigestError(
            "weight scheme was built under a different network/exposure configuration"
        )


def _cell_inputs(data, inclusion, level, gamma):
    c = cell_index(level, inclusion.mode)
    pi = inclusion.first_order[:, c]
    ind = (data.exposures.cell_codes() == c).astype(float)
    bad = (ind > 0) & (pi <= 0)
    if bad.any():
        uid = data.unit_ids[int(np.nonzero(bad)[0][0])]
        raise PositivityError(
            f"unit {uid!r} observed at cell {tuple(level)} with zero inclusion probability"
        )
    g = np.ones(data.n) if gamma is None else gamma.gamma[:, c]
    safe_pi = np.where(pi > 0, pi, 1.0)
    return ind, g, safe_pi


def ht_cell_mean(
    data: ObservedData,
    inclusion: InclusionTable,
    level: tuple[int, ...],
    gamma: WeightScheme | None = None,
) -> CellMeanEstimate:
    """Unbiased weighted cell mean: average of indicator * gamma * Y / pi.

    An empty cell yields value zero with an ``empty_cell`` flag (the
    estimator's actual value on such draws, which keeps design expectations
    exact); contrasts treat flagged cells as non-estimable.
    """
    _check_context(data, inclusion)
    _check_weights(gamma, inclusion)
    ind, g, safe_pi = _cell_inputs(data, inclusion, level, gamma)
    contrib = ind * g * data.y / safe_pi
    count = int(ind.sum())
    flags = [] if count >= 1 else ["empty_cell"]
    return CellMeanEstimate(
        level=tuple(level),
        estimator="ht",
        value=float(contrib.mean()),
        count=count,
        weight_sum=float((ind * g / safe_pi).mean()),
        gamma_kind=None if gamma is None else gamma.kind,
        flags=tuple(flags),
    )


def hajek_cell_mean(
    data: ObservedData,
    inclusion: InclusionTable,
    level: tuple[int, ...],
    gamma: WeightScheme | None = None,
) -> CellMeanEstimate:
    """Ratio-normalized cell mean; with unit weights this is the plain
    weighted average of observed outcomes in the cell."""
    _check_context(data, inclusion)
    _check_weights(gamma, inclusion)
    ind, g, safe_pi = _cell_inputs(data, inclusion, level, gamma)
    denom = float((ind * g / safe_pi).mean())
    if denom <= 0:
        raise EmptyCellError(f"no observed weight at cell {tuple(level)}")
    numer = float((ind * g * data.y / safe_pi).mean())
    value = float(g.mean()) * numer / denom
    return CellMeanEstimate(
        level=tuple(level),
        estimator="haj",
        value=value,
        count=int(ind.sum()),
        weight_sum=denom,
        gamma_kind=None if gamma is None else gamma.kind,
    )


def covariate_adjusted_cell_mean(
    data: ObservedData,
    inclusion: InclusionTable,
    level: tuple[int, ...],
) -> CellMeanEstimate:
    """Weighted residual mean plus average fitted value, with the adjustment
    fit by least squares within the cell (minimum-norm on rank deficiency).

    Falls back to the unadjusted estimator when fewer than two units are
    observed in the cell.
    """
    _check_context(data, inclusion)
    ind, _, safe_pi = _cell_inputs(data, inclusion, level, None)
    count = int(ind.sum())
    xmat = design_matrix(data)
    if count < 2:
        base = ht_cell_mean(data, inclusion, level)
        flags = base.flags + ("ca_fallback_ht",)
        return CellMeanEstimate(
            level=tuple(level),
            estimator="ca",
            value=base.value,
            count=count,
            weight_sum=base.weight_sum,
            flags=flags,
            beta=np.zeros(xmat.shape[1]),
        )
    mask = ind > 0
    beta, *_ = np.linalg.lstsq(xmat[mask], data.y[mask], rcond=None)
    fitted = xmat @ beta
    value = float((ind * (data.y - fitted) / safe_pi + fitted).mean())
    flags = []
    if count < xmat.shape[1] + 1:
        flags.append("ca_small_cell")
    return CellMeanEstimate(
        level=tuple(level),
        estimator="ca",
        value=value,
        count=count,
        weight_sum=float((ind / safe_pi).mean()),
        flags=tuple(flags),
        beta=beta,
    )


@dataclass(frozen=True)
class ContrastSpec:
    """A named weighted combination of cell means.

    ``allow_empty`` lets the unbiased estimator keep its actual value (zero)
    on component cells that happen to be empty in a draw, instead of marking
    the whole contrast non-estimable; used by the policy-specific sums.
    """

    name: str
    terms: tuple[tuple[float, tuple[int, ...]], ...]
    weight_kind: str | None = None
    allow_empty: bool = False


def de_contrast(s: int, h: int | None = None) -> ContrastSpec:
    if h is None:
        return ContrastSpec(f"DE(s={s})", ((1.0, (1, s)), (-1.0, (0, s))))
    return ContrastSpec(f"DE(s={s},h={h})", ((1.0, (1, s, h)), (-1.0, (0, s, h))))


def wie_contrast(s: int, s2: int, h: int | None = None, a: int = 0) -> ContrastSpec:
    if h is None:
        name = f"WIE(a={a})" if (s, s2) == (1, 0) else f"WIE(s={s},s'={s2},a={a})"
        return ContrastSpec(name, ((1.0, (a, s)), (-1.0, (a, s2))))
    name = (
        f"WIE(a={a},h={h})"
        if (s, s2) == (1, 0)
        else f"WIE(s={s},s'={s2},a={a},h={h})"
    )
    return ContrastSpec(name, ((1.0, (a, s, h)), (-1.0, (a, s2, h))))


def bie_contrast(s: int, h: int = 1, h2: int = 0, a: int = 0) -> ContrastSpec:
    name = f"BIE(a={a},s={s})" if (h, h2) == (1, 0) else f"BIE(s={s},h={h},h'={h2},a={a})"
    return ContrastSpec(name, ((1.0, (a, s, h)), (-1.0, (a, s, h2))))


def default_conditional_contrasts(mode: str = "full", a: int = 0) -> list[ContrastSpec]:
    """The standard panels: direct effects per exposure environment, and
    indirect contrasts (high vs low) holding own treatment at ``a``."""
    if mode == "reduced":
        out = [de_contrast(s) for s in (0, 1)]
        out.append(wie_contrast(1, 0, a=a))
        return out
    out = [de_contrast(s, h) for s in (0, 1) for h in (0, 1)]
    out += [wie_contrast(1, 0, h, a=a) for h in (0, 1)]
    out += [bie_contrast(s, a=a) for s in (0, 1)]
    return out


def policy_contrasts(mode: str = "full", a: int = 0) -> list[ContrastSpec]:
    if mode == "reduced":
        return [
            ContrastSpec(
                "DE_psi",
                tuple((w, (av, s)) for s in (0, 1) for w, av in ((1.0, 1), (-1.0, 0))),
                weight_kind="de",
                allow_empty=True,
            ),
            ContrastSpec(
                f"WIE_psi(a={a})",
                ((1.0, (a, 1)), (-1.0, (a, 0))),
                weight_kind="wie",
                allow_empty=True,
            ),
        ]
    return [
        ContrastSpec(
            "DE_psi",
            tuple(
                (w, (av, s, h))
                for s in (0, 1)
                for h in (0, 1)
                for w, av in ((1.0, 1), (-1.0, 0))
            ),
            weight_kind="de",
            allow_empty=True,
        ),
        ContrastSpec(
            f"WIE_psi(a={a})",
            tuple((w, (a, sv, h)) for h in (0, 1) for w, sv in ((1.0, 1), (-1.0, 0))),
            weight_kind="wie",
            allow_empty=True,
        ),
        ContrastSpec(
            f"BIE_psi(a={a})",
            tuple((w, (a, s, hv)) for s in (0, 1) for w, hv in ((1.0, 1), (-1.0, 0))),
            weight_kind="bie",
            allow_empty=True,
        ),
    ]


_CELL_FNS = {"ht": ht_cell_mean, "haj": hajek_cell_mean}


def _estimate_cell(data, inclusion, level, kind, gamma):
    if kind == "ca":
        return covariate_adjusted_cell_mean(data, inclusion, level)
    return _CELL_FNS[kind](data, inclusion, level, gamma=gamma)


def _cell_variance(data, inclusion, level, kind, gamma, cell_est, omega):
    if kind == "ca":
        return ca_variance(data, inclusion, level, cell_est.beta, omega=omega)
    return estimate_variance_cell(data, inclusion, level, gamma=gamma, kind=kind, omega=omega)


def estimate_effects(
    data: ObservedData,
    inclusion: InclusionTable,
    contrasts: list[ContrastSpec],
    kind: str = "ht",
    weights: dict[str, WeightScheme] | None = None,
    alpha: float = 0.05,
    with_variance: bool = True,
    omega_cache: dict | None = None,
) -> list[EffectEstimate]:
    """Estimate a batch of contrasts, sharing cell-level work.

    A contrast whose required cells are empty (or whose ratio denominator
    vanishes) is reported with status ``non_estimable`` rather than dropped.
    """
    _check_context(data, inclusion)
    if omega_cache is None:
        omega_cache = {}
    cell_cache: dict = {}
    results = []
    for spec in contrasts:
        gamma = None
        if spec.weight_kind is not None:
            if weights is None or spec.weight_kind not in weights:
                raise ValueError(f"contrast {spec.name} needs {spec.weight_kind!r} weights")
            gamma = weights[spec.weight_kind]
            _check_weights(gamma, inclusion)
        flags: list[str] = []
        status = "ok"
        point = 0.0
        comps: dict = {}
        comp_se: dict = {}
        se_parts: list[tuple[float, float]] = []
        for w, level in spec.terms:
            key = (level, kind, spec.weight_kind)
            if key not in cell_cache:
                try:
                    est = _estimate_cell(data, inclusion, level, kind, gamma)
                except EmptyCellError:
                    est = None
                if est is not None and with_variance:
                    okey = level
                    if okey not in omega_cache:
                        omega_cache[okey] = build_omega(inclusion, level)
                    try:
                        var = _cell_variance(
                            data, inclusion, level, kind, gamma, est, omega_cache[okey]
                        )
                    except EmptyCellError:
                        var = None
                else:
                    var = None
                cell_cache[key] = (est, var)
            est, var = cell_cache[key]
            empty_ok = spec.allow_empty and kind in ("ht", "ca")
            if (
                est is None
                or (est.empty and not empty_ok)
                or (with_variance and var is None)
            ):
                status = "non_estimable"
                comps[str(tuple(level))] = est
                continue
            comps[str(tuple(level))] = est
            if est.empty and "empty_component_cell" not in flags:
                flags.append("empty_component_cell")
            point += w * est.value
            flags.extend(f for f in est.flags if f not in flags)
            if gamma is not None and gamma.zero_flags[:, cell_index(level, inclusion.mode)].any():
                if "gamma_zero_conditioning" not in flags:
                    flags.append("gamma_zero_conditioning")
            if with_variance:
                se_parts.append((w, var.se))
                comp_se[str(tuple(level))] = var.se
                if var.corrected and "variance_corrected" not in flags:
                    flags.append("variance_corrected")
                if var.floored and "variance_floored" not in flags:
                    flags.append("variance_floored")
        if gamma is not None and gamma.policy_digest != inclusion.policy_digest:
            flags.append("psi_differs_from_design")
        if status == "non_estimable":
            results.append(
                EffectEstimate(
                    estimand=spec.name,
                    estimator=kind,
                    value=float("nan"),
                    se=float("nan"),
                    ci_lo=float("nan"),
                    ci_hi=float("nan"),
                    alpha=alpha,
                    status=status,
                    flags=tuple(flags),
                    components=comps,
                    component_se=comp_se,
                )
            )
            continue
        if with_variance:
            var_est = conservative_contrast_variance(se_parts)
            lo, hi = confidence_interval(point, var_est.value, alpha)
            se = var_est.se
        else:
            var_est, se, lo, hi = None, float("nan"), float("nan"), float("nan")
        results.append(
            EffectEstimate(
                estimand=spec.name,
                estimator=kind,
                value=float(point),
                se=se,
                ci_lo=lo,
                ci_hi=hi,
                alpha=alpha,
                status=status,
                flags=tuple(flags),
                components=comps,
                component_se=comp_se,
                variance=var_est,
            )
        )
    return results


def conditional_effects(
    data: ObservedData,
    inclusion: InclusionTable,
    kind: str = "ht",
    contrasts: list[ContrastSpec] | None = None,
    alpha: float = 0.05,
    with_variance: bool = True,
) -> list[EffectEstimate]:
    """Direct and indirect effect contrasts at fixed exposure levels."""
    if contrasts is None:
        contrasts = default_conditional_contrasts(inclusion.mode)
    return estimate_effects(
        data, inclusion, contrasts, kind=kind, alpha=alpha, with_variance=with_variance
    )


def wie_variants_holding_treated(
    data: ObservedData,
    inclusion: InclusionTable,
    kind: str = "ht",
    alpha: float = 0.05,
    with_variance: bool = True,
) -> list[EffectEstimate]:
    """Indirect-effect contrasts with own treatment held at one."""
    if inclusion.mode == "reduced":
        contrasts = [wie_contrast(1, 0, a=1)]
    else:
        contrasts = [wie_contrast(1, 0, h, a=1) for h in (0, 1)]
        contrasts += [bie_contrast(s, a=1) for s in (0, 1)]
    return estimate_effects(
        data, inclusion, contrasts, kind=kind, alpha=alpha, with_variance=with_variance
    )


def policy_effects(
    data: ObservedData,
    inclusion: InclusionTable,
    weights: dict[str, WeightScheme],
    kind: str = "ht",
    alpha: float = 0.05,
    hold_treated: bool = False,
    with_variance: bool = True,
) -> list[EffectEstimate]:
    """Policy-specific direct and indirect effects under reweighting.

    ``weights`` maps family name ("de", "wie", "bie") to the scheme computed
    under the target policy. When the target policy equals the implemented
    one these are the in-policy marginal effects. For the regression-adjusted
    kind, cells are combined with the population-average weights instead of
    reweighting inside the estimator.
    """
    a = 1 if hold_treated else 0
    contrasts = policy_contrasts(inclusion.mode, a=a)
    if inclusion.mode == "reduced":
        contrasts = [c for c in contrasts if c.weight_kind != "bie"]
    if kind == "ca":
        adjusted = []
        for spec in contrasts:
            scheme = weights[spec.weight_kind]
            _check_weights(scheme, inclusion)
            terms = tuple(
                (w * float(scheme.gamma[:, cell_index(lvl, inclusion.mode)].mean()), lvl)
                for w, lvl in spec.terms
            )
            adjusted.append(ContrastSpec(spec.name, terms, weight_kind=None, allow_empty=True))
        out = estimate_effects(
            data, inclusion, adjusted, kind="ca", alpha=alpha, with_variance=with_variance
        )
        for eff in out:
            eff.flags = eff.flags + ("ca_policy_mean_weights",)
        return out
    return estimate_effects(
        data,
        inclusion,
        contrasts,
        kind=kind,
        weights=weights,
        alpha=alpha,
        with_variance=with_variance,
    )
