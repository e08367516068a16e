"""Simulation harness: truth computation, replication aggregates, sweeps."""

import json

import numpy as np
import pytest

from satdesign import (
    DgpSpec,
    ExposureConfig,
    FixedFraction,
    SaturationLevel,
    SaturationPolicy,
    build_network,
    compute_truth,
    estimate_inclusion_mc,
    generate_po_table,
    run_replications,
    synthetic_units,
    weights_from_table,
)
from satdesign.simharness import PotentialOutcomeTable
from fractions import Fraction


@pytest.fixture(scope="module")
def small_scene():
    pol = SaturationPolicy(
        (
            SaturationLevel("high", 0.5, FixedFraction(Fraction(2, 3))),
            SaturationLevel("low", 0.5, FixedFraction(Fraction(1, 3))),
        )
    )
    cfg = ExposureConfig()
    units = synthetic_units(48, 7)
    net = build_network(units, 4.0, 3)
    inc = estimate_inclusion_mc(pol, net, cfg, 4000, 3)
    return pol, cfg, net, inc


def test_po_table_effects_and_clamp(small_scene):
    _, _, net, _ = small_scene
    spec = DgpSpec(theta_a=1.0, theta_s=0.5, theta_h=0.25, noise_sd=0.0)
    po = generate_po_table(net, spec, 5)
    truth = compute_truth(po, exact_surrogate(net))
    for s in (0, 1):
        for h in (0, 1):
            assert truth.values[f"DE(s={s},h={h})"] == pytest.approx(1.0, abs=1e-12)
    assert truth.values["WIE(a=0,h=0)"] == pytest.approx(0.5, abs=1e-12)
    assert truth.values["BIE(a=0,s=1)"] == pytest.approx(0.25, abs=1e-12)
    clamped = generate_po_table(net, DgpSpec(baseline_mean=100.0, clamp=1.0), 5)
    assert np.abs(clamped.values).max() <= 1.0
    assert clamped.n_clamped > 0


def exact_surrogate(net):
    """A minimal inclusion-table stand-in for truth computation (full mode)."""
    from satdesign.inclusion import InclusionTable

    n = net.n
    return InclusionTable(
        unit_ids=net.unit_ids,
        mode="full",
        first_order=np.full((n, 8), 1 / 8),
        pair_i=np.empty(0, dtype=np.intp),
        pair_j=np.empty(0, dtype=np.intp),
        second_order=np.zeros((0, 8, 8)),
        estimation="exact",
        draws=None,
        seed=None,
        m=2,
        policy_digest="x",
        exposure_digest="x",
        network_digest="x",
    )


def test_zero_theta_gives_zero_truth(small_scene):
    _, _, net, _ = small_scene
    po = generate_po_table(net, DgpSpec(theta_a=0, theta_s=0, theta_h=0), 6)
    truth = compute_truth(po, exact_surrogate(net))
    for name, val in truth.values.items():
        if not name.startswith("Y("):
            assert val == pytest.approx(0.0, abs=1e-12)


def test_marginal_truth_equals_conditional_when_flat(small_scene):
    """Outcomes free of (s,h): the policy direct effect equals theta_a."""
    pol, cfg, net, inc = small_scene
    po = generate_po_table(net, DgpSpec(theta_s=0.0, theta_h=0.0, noise_sd=0.3), 8)
    w = {k: weights_from_table(inc, k) for k in ("de", "wie", "bie")}
    truth = compute_truth(po, inc, w)
    assert truth.values["DE_psi"] == pytest.approx(truth.values["DE(s=0,h=0)"], abs=1e-9)
    assert truth.values["DE_psi"] == pytest.approx(1.0, abs=1e-9)


def test_d1_policy_truth_against_direct_enumeration(
    d1_policy, d1_network, exposure_cfg, d1_exact, d1_support, d1_po
):
    """Weight-averaged truth equals the conditional-expectation enumeration."""
    from satdesign import AssignmentVector, compute_exposures

    w = {k: weights_from_table(d1_exact, k) for k in ("de", "wie", "bie")}
    truth = compute_truth(PotentialOutcomeTable(values=d1_po, spec=DgpSpec()), d1_exact, w)
    n = 6
    acc1, acc0 = np.zeros(n), np.zeros(n)
    pa1, pa0 = np.zeros(n), np.zeros(n)
    for a, p in d1_support:
        codes = compute_exposures(AssignmentVector(a), d1_network, exposure_cfg).cell_codes()
        y = d1_po[np.arange(n), codes]
        treated = a == 1
        acc1[treated] += p * y[treated]
        pa1[treated] += p
        acc0[~treated] += p * y[~treated]
        pa0[~treated] += p
    direct = (acc1 / pa1).mean() - (acc0 / pa0).mean()
    assert truth.values["DE_psi"] == pytest.approx(direct, abs=1e-10)


def test_replication_report_identities(small_scene):
    pol, cfg, net, inc = small_scene
    po = generate_po_table(net, DgpSpec(), 9)
    rep = run_replications(pol, net, cfg, po, inc, 60, 11)
    for row in rep.rows:
        if "rmse" in row:
            assert row["rmse"] ** 2 == pytest.approx(
                row["bias"] ** 2 + row["var_emp"], abs=1e-9
            )
            assert 0.0 <= row.get("coverage", 0.0) <= 1.0
            assert row["n_used"] + row["n_excluded"] == 60


def test_replication_seed_determinism(small_scene):
    pol, cfg, net, inc = small_scene
    po = generate_po_table(net, DgpSpec(), 9)
    r1 = run_replications(pol, net, cfg, po, inc, 25, 13)
    r2 = run_replications(pol, net, cfg, po, inc, 25, 13)
    assert r1.to_json() == r2.to_json()
    r3 = run_replications(pol, net, cfg, po, inc, 25, 14)
    assert r1.to_json() != r3.to_json()


def test_report_json_stable_and_loadable(small_scene):
    pol, cfg, net, inc = small_scene
    po = generate_po_table(net, DgpSpec(), 9)
    rep = run_replications(pol, net, cfg, po, inc, 10, 15)
    parsed = json.loads(rep.to_json())
    assert parsed["meta"]["replications"] == 10
    assert {r["estimand"] for r in parsed["rows"]} >= {"DE_psi", "DE(s=0,h=0)"}


def test_zero_noise_constant_effect_unbiased(small_scene):
    """theta_a-only table with no noise: the ratio estimator nails the
    direct effect wherever both cells appear."""
    pol, cfg, net, inc = small_scene
    po = generate_po_table(
        net, DgpSpec(baseline_sd=0.0, noise_sd=0.0, theta_s=0.0, theta_h=0.0), 10
    )
    rep = run_replications(
        pol, net, cfg, po, inc, 40, 16, estimators=("haj",), include_policy=False,
        include_treated=False, with_variance=False,
    )
    row = rep.row("DE(s=0,h=0)", "haj")
    assert row["bias"] == pytest.approx(0.0, abs=1e-12)
    assert row["rmse"] == pytest.approx(0.0, abs=1e-12)


def test_ht_unbiased_over_exact_replication(d1_policy, d1_network, exposure_cfg, d1_exact, d1_support, d1_po):
    """Replication replaced by exact enumeration: zero bias to 1e-10."""
    from satdesign import AssignmentVector, compute_exposures, ht_cell_mean
    from satdesign.data import observe

    for lvl in [(0, 0, 0), (0, 1, 0), (1, 0, 0)]:
        e = 0.0
        for a, p in d1_support:
            av = AssignmentVector(a)
            ex = compute_exposures(av, d1_network, exposure_cfg)
            y = d1_po[np.arange(6), ex.cell_codes()]
            e += p * ht_cell_mean(observe(d1_network, av, exposure_cfg, y), d1_exact, lvl).value
        from satdesign.exposure import cell_index

        assert e == pytest.approx(d1_po[:, cell_index(lvl)].mean(), abs=1e-10)


def test_synthetic_units_properties():
    units = synthetic_units(100, 5, cluster_sizes=(4, 6))
    sizes = {}
    for u in units:
        sizes[u.cluster_id] = sizes.get(u.cluster_id, 0) + 1
    assert sum(sizes.values()) == 100
    assert set(sizes.values()) <= {4, 6, 7, 8, 10}
    net = build_network(units, 4.0, 3)
    assert (net.geo_counts() >= 1).all()
    # determinism
    units2 = synthetic_units(100, 5, cluster_sizes=(4, 6))
    assert [(u.unit_id, u.x_km, u.y_km) for u in units2] == [
        (u.unit_id, u.x_km, u.y_km) for u in units
    ]


def test_odd_n_units_handled():
    units = synthetic_units(53, 4, cluster_sizes=(4, 6))
    assert len(units) == 53


def test_sweep_zero_dgp_gives_zero_rmse():
    from satdesign import consistency_sweep

    pol = SaturationPolicy(
        (
            SaturationLevel("high", 0.5, FixedFraction(Fraction(2, 3))),
            SaturationLevel("low", 0.5, FixedFraction(Fraction(1, 3))),
        )
    )
    flat = DgpSpec(baseline_mean=0.0, baseline_sd=0.0, theta_a=0.0, theta_s=0.0,
                   theta_h=0.0, noise_sd=0.0)
    sweep = consistency_sweep(pol, flat, (48, 96), replications=30, draws=2000, seed=5)
    for row in sweep.rows:
        assert row["rmse_cells"]["haj"] == pytest.approx(0.0, abs=1e-12)
        assert row["rmse_cells"]["ht"] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.slow
def test_ca_coverage_under_linear_dgp():
    """Regression-adjusted CIs cover at >= 0.93 when a covariate is highly
    predictive of the potential outcomes."""
    import numpy as np

    pol = SaturationPolicy(
        (
            SaturationLevel("high", 0.5, FixedFraction(Fraction(2, 3))),
            SaturationLevel("low", 0.5, FixedFraction(Fraction(1, 3))),
        )
    )
    cfg = ExposureConfig()
    units = synthetic_units(300, 21, cluster_sizes=(4, 4, 4, 4, 4, 6),
                            grid_spacing_km=3.2, unit_spread_km=0.5)
    net = build_network(units, 4.0, 3)
    inc = estimate_inclusion_mc(pol, net, cfg, 30_000, [21, 1])
    po = generate_po_table(net, DgpSpec(baseline_sd=1.0, noise_sd=0.0), [21, 2])
    rng = np.random.default_rng(22)
    # covariate = unit baseline plus measurement noise: strongly predictive
    from satdesign.exposure import cell_index

    x = (po.values[:, cell_index((0, 0, 0))] + rng.normal(0, 0.2, net.n))[:, None]
    rep = run_replications(
        pol, net, cfg, po, inc, 400, [21, 3], estimators=("ca",),
        include_policy=False, include_treated=False, covariates=x,
    )
    covs = [
        r["coverage"]
        for r in rep.rows
        if r["estimand"].startswith("DE(") and "coverage" in r
    ]
    assert covs and float(np.mean(covs)) >= 0.93
