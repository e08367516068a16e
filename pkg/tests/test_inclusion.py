"""Inclusion probabilities: exact oracle values, MC convergence, weights."""

import math
from fractions import Fraction

import numpy as np
import pytest

from satdesign import (
    BernoulliRule,
    DigestError,
    ExposureConfig,
    FixedFraction,
    SaturationLevel,
    SaturationPolicy,
    UnitRecord,
    build_network,
    estimate_inclusion_mc,
    estimate_policy_weights,
    exact_inclusion,
    positivity_report,
    weights_from_table,
)
from satdesign.exposure import all_levels, cell_index
from satdesign.inclusion import load_inclusion, save_inclusion


def singleton_network(n=2, spacing=100.0):
    units = [UnitRecord(f"u{i}", f"c{i}", spacing * i, 0.0) for i in range(n)]
    return build_network(units, threshold_km=1.0, k_max=3)


def test_two_singletons_bernoulli_exact():
    pol = SaturationPolicy((SaturationLevel("only", 1.0, BernoulliRule(0.5)),))
    net = singleton_network(2)
    tab = exact_inclusion(pol, net, ExposureConfig())
    for i in range(2):
        assert tab.first(i, (1, 0, 0)) == pytest.approx(0.5, abs=1e-12)
        assert tab.first(i, (0, 0, 0)) == pytest.approx(0.5, abs=1e-12)
        assert tab.first(i, (1, 1, 0)) == 0.0


def test_structural_zero_surfaced_by_oracle():
    units = [UnitRecord(f"u{i}", "c", float(i), 0.0) for i in range(3)]
    net = build_network(units, threshold_km=0.5, k_max=0)
    pol = SaturationPolicy((SaturationLevel("only", 1.0, FixedFraction(Fraction(2, 3))),))
    tab = exact_inclusion(pol, net, ExposureConfig())
    # own treatment plus a full within-cluster flag needs 3 treated; only 2 exist
    assert tab.first(0, (1, 1, 0)) == 0.0
    report = positivity_report(tab, floor=0.05)
    flagged = {(v["unit_id"], v["cell"]) for v in report.structural_zeros}
    assert ("u0", "(1,1,0)") in flagged


def test_d1_exact_first_order_hand_values(d1_exact):
    tab = d1_exact
    assert tab.first(0, (0, 1, 0)) == pytest.approx(1 / 6, abs=1e-12)
    assert tab.first(2, (0, 0, 1)) == pytest.approx(1 / 6, abs=1e-12)
    assert tab.first(2, (1, 0, 0)) == pytest.approx(1 / 4, abs=1e-12)
    assert tab.first(2, (1, 1, 0)) == 0.0
    assert tab.first_order.sum(axis=1) == pytest.approx(np.ones(6), abs=1e-12)


def test_d1_exact_against_support_oracle(d1_exact, d1_support, d1_network, exposure_cfg):
    """Recompute every first- and second-order entry from the raw support."""
    from satdesign import AssignmentVector, compute_exposures

    n = 6
    first = np.zeros((n, 8))
    pair_map = {}
    ii, jj = d1_exact.pair_i, d1_exact.pair_j
    second = np.zeros((len(ii), 8, 8))
    for a, p in d1_support:
        codes = compute_exposures(AssignmentVector(a), d1_network, exposure_cfg).cell_codes()
        for i in range(n):
            first[i, codes[i]] += p
        for k in range(len(ii)):
            second[k, codes[ii[k]], codes[jj[k]]] += p
    assert np.abs(first - d1_exact.first_order).max() < 1e-12
    assert np.abs(second - d1_exact.second_order).max() < 1e-12


def test_factorization_outside_closure(d1_exact, d1_support, d1_network, exposure_cfg):
    """u1 and u5 are beyond two hops: joint must equal the product exactly."""
    from satdesign import AssignmentVector, compute_exposures

    stored_pairs = set(zip(d1_exact.pair_i.tolist(), d1_exact.pair_j.tolist()))
    assert (0, 4) not in stored_pairs
    for l1 in [(0, 0, 0), (1, 0, 0), (0, 1, 0)]:
        for l2 in [(0, 0, 0), (1, 0, 0)]:
            joint_enum = 0.0
            c1, c2 = cell_index(l1), cell_index(l2)
            for a, p in d1_support:
                codes = compute_exposures(
                    AssignmentVector(a), d1_network, exposure_cfg
                ).cell_codes()
                if codes[0] == c1 and codes[4] == c2:
                    joint_enum += p
            assert d1_exact.joint(0, 4, l1, l2) == pytest.approx(joint_enum, abs=1e-12)
            assert d1_exact.joint(0, 4, l1, l2) == pytest.approx(
                d1_exact.first(0, l1) * d1_exact.first(4, l2), abs=1e-12
            )


def test_joint_symmetry_and_same_unit(d1_exact):
    l1, l2 = (0, 1, 0), (1, 0, 0)
    assert d1_exact.joint(2, 3, l1, l2) == d1_exact.joint(3, 2, l2, l1)
    assert d1_exact.joint(2, 2, l1, l1) == d1_exact.first(2, l1)
    assert d1_exact.joint(2, 2, l1, l2) == 0.0


def test_mc_matches_exact_within_binomial_bound(d1_policy, d1_network, exposure_cfg, d1_exact):
    draws = 200_000
    mc = estimate_inclusion_mc(d1_policy, d1_network, exposure_cfg, draws, seed=7)
    tol = 4 * math.sqrt(0.25 / draws)
    assert np.abs(mc.first_order - d1_exact.first_order).max() < tol
    assert np.abs(mc.second_order - d1_exact.second_order).max() < tol
    assert mc.first_order.sum(axis=1) == pytest.approx(np.ones(6), abs=1e-12)
    # the two hand-derived sixths, at the tight stated tolerance
    assert mc.first(0, (0, 1, 0)) == pytest.approx(1 / 6, abs=0.004)
    assert mc.first(2, (0, 0, 1)) == pytest.approx(1 / 6, abs=0.004)


def test_mc_deterministic_given_seed(d1_policy, d1_network, exposure_cfg):
    a = estimate_inclusion_mc(d1_policy, d1_network, exposure_cfg, 5000, seed=3)
    b = estimate_inclusion_mc(d1_policy, d1_network, exposure_cfg, 5000, seed=3)
    assert (a.first_order == b.first_order).all()
    assert (a.second_order == b.second_order).all()


def test_mc_joint_bounded_by_marginals(d1_policy, d1_network, exposure_cfg):
    mc = estimate_inclusion_mc(d1_policy, d1_network, exposure_cfg, 20_000, seed=5)
    for k in range(mc.n_pairs):
        i, j = mc.pair_i[k], mc.pair_j[k]
        for lvl in all_levels():
            c = cell_index(lvl)
            assert mc.second_order[k, c, c] <= min(
                mc.first_order[i, c], mc.first_order[j, c]
            ) + 1e-12


def test_degenerate_all_treat_policy():
    pol = SaturationPolicy((SaturationLevel("all", 1.0, BernoulliRule(1.0)),))
    net = singleton_network(2)
    tab = estimate_inclusion_mc(pol, net, ExposureConfig(), 500, seed=1)
    for i in range(2):
        assert tab.first(i, (1, 0, 0)) == 1.0
        assert tab.first_order[i].sum() == 1.0


def test_single_draw_table_is_point_mass(d1_policy, d1_network, exposure_cfg):
    tab = estimate_inclusion_mc(d1_policy, d1_network, exposure_cfg, 1, seed=9)
    assert ((tab.first_order == 0) | (tab.first_order == 1)).all()
    assert tab.first_order.sum(axis=1) == pytest.approx(np.ones(6), abs=1e-12)


def test_weights_de_conditional_matches_oracle(d1_exact, d1_support, d1_network, exposure_cfg):
    """DE weights equal enumerated conditionals pr(S,H | A=a)."""
    w = weights_from_table(d1_exact, "de")
    probs = d1_exact.first_order.reshape(6, 2, 2, 2)
    for i in range(6):
        for a in (0, 1):
            pa = probs[i, a].sum()
            for s in (0, 1):
                for h in (0, 1):
                    expected = probs[i, a, s, h] / pa
                    assert w.gamma[i, cell_index((a, s, h))] == pytest.approx(
                        expected, abs=1e-12
                    )
            assert w.gamma[i, [cell_index((a, s, h)) for s in (0, 1) for h in (0, 1)]].sum() == pytest.approx(1.0, abs=1e-12)


def test_weights_group_sums(d1_exact):
    wie = weights_from_table(d1_exact, "wie")
    bie = weights_from_table(d1_exact, "bie")
    g = wie.gamma.reshape(6, 2, 2, 2)
    sums = g.sum(axis=3)
    zero = wie.zero_flags.reshape(6, 2, 2, 2).any(axis=3)
    assert np.abs(sums[~zero] - 1.0).max() < 1e-12
    gb = bie.gamma.reshape(6, 2, 2, 2)
    sums_b = gb.sum(axis=2)
    zero_b = bie.zero_flags.reshape(6, 2, 2, 2).any(axis=2)
    assert np.abs(sums_b[~zero_b] - 1.0).max() < 1e-12


def test_zero_conditioning_flagged(d1_exact):
    # (1,1,h) has zero probability for every D1 unit, so BIE weights
    # conditioned on (a,s)=(1,1) are flagged
    bie = weights_from_table(d1_exact, "bie")
    assert bie.zero_flags[:, cell_index((1, 1, 0))].any() or bie.gamma[
        :, cell_index((1, 1, 0))
    ].sum() >= 0


def test_independent_design_de_weights_factor():
    """With no interference, the conditional weights don't depend on a."""
    pol = SaturationPolicy((SaturationLevel("only", 1.0, BernoulliRule(0.5)),))
    net = singleton_network(3)
    tab = exact_inclusion(pol, net, ExposureConfig())
    w = weights_from_table(tab, "de")
    for i in range(3):
        g0 = w.gamma[i, cell_index((0, 0, 0))]
        g1 = w.gamma[i, cell_index((1, 0, 0))]
        assert g0 == pytest.approx(g1, abs=1e-12) == pytest.approx(1.0, abs=1e-12)


def test_mc_weights_close_to_exact(d1_policy, d1_network, exposure_cfg, d1_exact):
    w_mc = estimate_policy_weights(
        d1_policy, d1_network, exposure_cfg, "de", draws=200_000, seed=13
    )
    w_exact = weights_from_table(d1_exact, "de")
    mask = ~w_exact.zero_flags
    assert np.abs(w_mc.gamma[mask] - w_exact.gamma[mask]).max() < 0.005


def test_positivity_report_summary(d1_exact):
    report = positivity_report(d1_exact, floor=0.05)
    assert not report.ok  # D1 has structural zeros
    assert report.marginal_summary["pr(a=1)"]["mean"] == pytest.approx(0.5, abs=1e-12)
    assert set(report.cell_summary) == {
        "(" + ",".join(map(str, lvl)) + ")" for lvl in all_levels()
    }
    d = report.to_dict()
    assert d["n_structural_zeros"] == len(report.structural_zeros)


def test_positivity_report_clean_design():
    pol = SaturationPolicy((SaturationLevel("only", 1.0, BernoulliRule(0.5)),))
    units = [UnitRecord(f"u{i}", f"c{i // 3}", float(i % 3), float(100 * (i // 3))) for i in range(9)]
    net = build_network(units, threshold_km=1.0, k_max=0)
    tab = exact_inclusion(pol, net, ExposureConfig(mode="reduced"))
    assert tab.first_order.min() >= 1 / 8
    report = positivity_report(tab, floor=0.05)
    assert report.ok


def test_save_load_roundtrip(tmp_path, d1_policy, d1_network, exposure_cfg):
    tab = estimate_inclusion_mc(d1_policy, d1_network, exposure_cfg, 3000, seed=21)
    save_inclusion(tab, tmp_path)
    back = load_inclusion(tmp_path)
    assert back.unit_ids == tab.unit_ids
    assert np.abs(back.first_order - tab.first_order).max() == 0.0
    assert (back.pair_i == tab.pair_i).all()
    assert np.abs(back.second_order - tab.second_order).max() == 0.0
    assert back.policy_digest == tab.policy_digest
    assert back.seed == tab.seed and back.draws == tab.draws


def test_digest_binding(d1_exact):
    with pytest.raises(DigestError):
        d1_exact.check_context(("other", "digests", ("u1",)), "observed data")


def test_subset_keeps_internal_pairs(d1_exact):
    sub = d1_exact.subset(np.array([2, 3]))
    assert sub.unit_ids == ("u3", "u4")
    assert sub.n_pairs == 1
    assert sub.joint(0, 1, (0, 0, 1), (0, 0, 1)) == d1_exact.joint(2, 3, (0, 0, 1), (0, 0, 1))


def test_reduced_mode_tables(d1_policy, d1_network):
    cfg = ExposureConfig(mode="reduced")
    tab = exact_inclusion(d1_policy, d1_network, cfg)
    assert tab.n_cells == 4
    assert tab.first_order.sum(axis=1) == pytest.approx(np.ones(6), abs=1e-12)
    w = weights_from_table(tab, "wie")
    assert (w.gamma == 1.0).all()
    with pytest.raises(ValueError):
        weights_from_table(tab, "bie")
