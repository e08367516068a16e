"""Policy sampling and enumeration against independent combinatorial oracles."""

import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from satdesign import (
    AssignmentVector,
    BernoulliRule,
    FixedFraction,
    SaturationLevel,
    SaturationPolicy,
    SupportTooLargeError,
    UnitRecord,
    build_network,
    enumerate_assignments,
    policy_support_size,
    sample_assignment,
    sample_assignment_batch,
)


def single_level(rule):
    return SaturationPolicy((SaturationLevel("only", 1.0, rule),))


def simple_network(cluster_sizes):
    units = []
    for ci, size in enumerate(cluster_sizes):
        for j in range(size):
            units.append(UnitRecord(f"c{ci}u{j}", f"c{ci}", float(100 * ci), float(j)))
    return build_network(units, threshold_km=1.0, k_max=0)


def test_level_probs_must_sum_to_one():
    with pytest.raises(ValueError, match="sum"):
        SaturationPolicy(
            (
                SaturationLevel("a", 0.6, BernoulliRule(0.5)),
                SaturationLevel("b", 0.5, BernoulliRule(0.5)),
            )
        )


def test_fixed_fraction_round_half_up():
    assert FixedFraction(Fraction(2, 3)).treated_count(3) == 2
    assert FixedFraction(Fraction(1, 3)).treated_count(3) == 1
    assert FixedFraction(Fraction(1, 2)).treated_count(3) == 2  # 1.5 rounds up
    assert FixedFraction(Fraction(2, 3)).treated_count(5) == 3  # 10/3 -> 3.33
    assert FixedFraction(Fraction(1, 2)).treated_count(5) == 3  # 2.5 rounds up


def test_degenerate_bernoulli_one_gives_all_ones():
    net = simple_network([3, 2])
    a = sample_assignment(single_level(BernoulliRule(1.0)), net, seed=0)
    assert a.treatment.tolist() == [1] * 5


def test_fixed_fraction_forces_count():
    net = simple_network([3])
    pol = single_level(FixedFraction(Fraction(2, 3)))
    for seed in range(20):
        a = sample_assignment(pol, net, seed=seed)
        assert a.treatment.sum() == 2


def test_sampling_is_pure_function_of_seed():
    net = simple_network([4, 5, 3])
    pol = SaturationPolicy(
        (
            SaturationLevel("high", 0.5, FixedFraction(Fraction(2, 3))),
            SaturationLevel("low", 0.5, BernoulliRule(0.4)),
        )
    )
    a1 = sample_assignment(pol, net, seed=(123, 7))
    a2 = sample_assignment(pol, net, seed=(123, 7))
    a3 = sample_assignment(pol, net, seed=(123, 8))
    assert (a1.treatment == a2.treatment).all()
    assert a1.levels == a2.levels
    assert (a1.treatment != a3.treatment).any()


def test_batch_is_deterministic_and_matches_law():
    net = simple_network([3, 3])
    pol = single_level(FixedFraction(Fraction(1, 3)))
    b1 = sample_assignment_batch(pol, net, seed=5, draws=100)
    b2 = sample_assignment_batch(pol, net, seed=5, draws=100)
    assert (b1 == b2).all()
    assert (b1.sum(axis=1) == 2).all()  # one treated per cluster


def enumerate_d1_by_hand(network):
    """Independent oracle for the two-cluster design: both clusters range
    over (2 levels x 3 subsets), 36 vectors, each probability 1/36."""
    per_cluster = []
    for lab in network.cluster_labels:
        members = list(network.clusters[lab])
        options = []
        for m in (2, 1):  # high treats 2 of 3, low treats 1 of 3
            for chosen in itertools.combinations(members, m):
                options.append((frozenset(chosen), 0.5 / 3))
        per_cluster.append(options)
    out = {}
    for combo in itertools.product(*per_cluster):
        treated = frozenset().union(*[c for c, _ in combo])
        prob = math.prod(p for _, p in combo)
        key = tuple(sorted(treated))
        out[key] = out.get(key, 0.0) + prob
    return out


def test_d1_enumeration_against_hand_oracle(d1_policy, d1_network):
    support = enumerate_assignments(d1_policy, d1_network)
    assert len(support) == 36
    assert sum(p for _, p in support) == pytest.approx(1.0, abs=1e-12)
    oracle = enumerate_d1_by_hand(d1_network)
    got = {tuple(np.nonzero(a)[0].tolist()): p for a, p in support}
    assert set(got) == set(oracle)
    for key in oracle:
        assert got[key] == pytest.approx(oracle[key], abs=1e-12)
        assert got[key] == pytest.approx(1 / 36, abs=1e-12)


def test_support_sizes():
    net3 = simple_network([3])
    assert policy_support_size(single_level(FixedFraction(Fraction(2, 3))), net3) == 3
    net4 = simple_network([4])
    assert policy_support_size(single_level(FixedFraction(Fraction(1, 2))), net4) == 6
    net_bern = simple_network([3, 2])
    assert policy_support_size(single_level(BernoulliRule(0.5)), net_bern) == 2**5


def test_d1_support_size(d1_policy, d1_network):
    assert policy_support_size(d1_policy, d1_network) == 36


def test_enumeration_merges_duplicate_vectors():
    # two levels with the same treated count share their support
    pol = SaturationPolicy(
        (
            SaturationLevel("x", 0.25, FixedFraction(Fraction(1, 3))),
            SaturationLevel("y", 0.75, FixedFraction(Fraction(1, 3))),
        )
    )
    net = simple_network([3])
    support = enumerate_assignments(pol, net)
    assert len(support) == 3
    assert policy_support_size(pol, net) == 3
    for _, p in support:
        assert p == pytest.approx(1 / 3, abs=1e-12)


def test_two_singleton_bernoulli_support():
    pol = single_level(BernoulliRule(0.5))
    net = simple_network([1, 1])
    support = enumerate_assignments(pol, net)
    assert len(support) == 4
    for _, p in support:
        assert p == pytest.approx(0.25, abs=1e-12)


def test_enumeration_cap_refusal():
    pol = single_level(BernoulliRule(0.5))
    net = simple_network([10, 11])
    with pytest.raises(SupportTooLargeError, match=str(2**21)):
        enumerate_assignments(pol, net, cap=10**6)


def test_within_cluster_marginals_equal(d1_policy, d1_network, d1_support):
    """FixedFraction sampling is exchangeable inside a cluster."""
    marg = np.zeros(6)
    for a, p in d1_support:
        marg += p * a
    assert marg == pytest.approx(np.full(6, 0.5), abs=1e-12)


def test_empirical_frequency_matches_enumeration(d1_policy, d1_network, d1_support):
    """Event frequencies converge to enumerated probabilities (4-sigma)."""
    draws = 100_000
    batch = sample_assignment_batch(d1_policy, d1_network, seed=99, draws=draws)
    emp_marg = batch.mean(axis=0)
    tol = 4 * math.sqrt(0.25 / draws)
    assert np.abs(emp_marg - 0.5).max() < max(tol, 0.005)
    # a joint event: units 0 and 1 both treated
    p_event = sum(p for a, p in d1_support if a[0] == 1 and a[1] == 1)
    emp_event = float((batch[:, 0] & batch[:, 1]).mean())
    sigma = math.sqrt(p_event * (1 - p_event) / draws)
    assert abs(emp_event - p_event) < 4 * sigma


def test_single_draw_sampler_matches_law(d1_policy, d1_network, d1_support):
    draws = 8000
    counts = np.zeros(6)
    for b in range(draws):
        counts += sample_assignment(d1_policy, d1_network, seed=(4242, b)).treatment
    emp = counts / draws
    tol = 4 * math.sqrt(0.25 / draws)
    assert np.abs(emp - 0.5).max() < tol


def test_assignment_vector_validates_binary():
    with pytest.raises(ValueError):
        AssignmentVector(np.array([0, 2, 1]))


def test_assignment_export_csv(tmp_path, d1_network, d1_policy):
    from satdesign.design import save_assignment_csv

    a = sample_assignment(d1_policy, d1_network, seed=3)
    path = tmp_path / "assignment.csv"
    save_assignment_csv(path, d1_network, a)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "unit_id,treatment"
    assert len(lines) == 7
    parsed = dict(line.split(",") for line in lines[1:])
    assert parsed["u1"] in {"0", "1"}


def test_policy_hazard_flagging():
    from satdesign.design import policy_hazards

    net = simple_network([2, 3])
    pol = single_level(FixedFraction(Fraction(1, 5)))  # rounds to 0 for size 2
    notes = policy_hazards(pol, net)
    assert any("degenerate" in n for n in notes)
    assert not policy_hazards(single_level(FixedFraction(Fraction(1, 2))), net)
