"""Shared fixtures: the 6-unit two-cluster layout used across the suite."""

import numpy as np
import pytest
from fractions import Fraction

from satdesign import (
    ExposureConfig,
    FixedFraction,
    SaturationLevel,
    SaturationPolicy,
    UnitRecord,
    build_network,
    exact_inclusion,
)

# Two clusters of three; only units u3 and u4 are within 4 km of a
# cross-cluster unit, so G_3 = {u4}, G_4 = {u3}, all other G_i empty.
D1_UNITS = [
    UnitRecord("u1", "A", 0.0, 0.0),
    UnitRecord("u2", "A", 0.0, 1.0),
    UnitRecord("u3", "A", 4.0, 0.0),
    UnitRecord("u4", "B", 7.0, 0.0),
    UnitRecord("u5", "B", 11.0, 0.0),
    UnitRecord("u6", "B", 11.0, 1.0),
]


@pytest.fixture(scope="session")
def d1_network():
    return build_network(D1_UNITS, threshold_km=4.0, k_max=3)


@pytest.fixture(scope="session")
def d1_policy():
    return SaturationPolicy(
        (
            SaturationLevel("high", 0.5, FixedFraction(Fraction(2, 3))),
            SaturationLevel("low", 0.5, FixedFraction(Fraction(1, 3))),
        )
    )


@pytest.fixture(scope="session")
def exposure_cfg():
    return ExposureConfig()


@pytest.fixture(scope="session")
def d1_exact(d1_policy, d1_network, exposure_cfg):
    return exact_inclusion(d1_policy, d1_network, exposure_cfg)


@pytest.fixture(scope="session")
def d1_support(d1_policy, d1_network):
    from satdesign import enumerate_assignments

    return enumerate_assignments(d1_policy, d1_network)


def constant_po_table(n: int = 6):
    """Potential outcomes Y(a,s,h) = a + 0.5 s + 0.25 h for every unit."""
    from satdesign.exposure import all_levels, cell_index

    po = np.zeros((n, 8))
    for lvl in all_levels():
        po[:, cell_index(lvl)] = lvl[0] + 0.5 * lvl[1] + 0.25 * lvl[2]
    return po


@pytest.fixture(scope="session")
def d1_po():
    return constant_po_table()


# Two clusters of four with a single geographic bridge (u4-u5). Unlike the
# three-unit clusters, a treated unit here can see a high within-cluster
# share (2 of 3 peers under the high level), so (1,1,.) cells are reachable.
D2_UNITS = [
    UnitRecord("u1", "A", 0.0, 0.0),
    UnitRecord("u2", "A", 0.0, 1.0),
    UnitRecord("u3", "A", 1.0, 0.0),
    UnitRecord("u4", "A", 4.0, 0.0),
    UnitRecord("u5", "B", 7.0, 0.0),
    UnitRecord("u6", "B", 11.0, 0.0),
    UnitRecord("u7", "B", 11.0, 1.0),
    UnitRecord("u8", "B", 12.0, 0.0),
]


@pytest.fixture(scope="session")
def d2_network():
    net = build_network(D2_UNITS, threshold_km=4.0, k_max=3)
    assert net.geo_neighbors[3] == (4,) and net.geo_neighbors[4] == (3,)
    return net


@pytest.fixture(scope="session")
def d2_exact(d1_policy, d2_network, exposure_cfg):
    return exact_inclusion(d1_policy, d2_network, exposure_cfg)


@pytest.fixture(scope="session")
def d2_support(d1_policy, d2_network):
    from satdesign import enumerate_assignments

    return enumerate_assignments(d1_policy, d2_network)
