"""Region partitioning: uniform tiling, the division GA against exhaustive
enumeration, re-division geometry, and the trigger logic."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leosim.config import GaDivConfig
from leosim.regions import (
    InfeasibleBoundsError,
    NoFeasibleResizeError,
    RegionStats,
    apply_redivision,
    chromosome_bounds,
    exchange_neighborhood,
    exhaustive_divide,
    ga_divide,
    ga_redivide,
    should_redivide,
    single_region_map,
    uniform_map,
)


# -- bounds and tiling ----------------------------------------------------------


def test_chromosome_bounds_oracle():
    assert chromosome_bounds(64, 2) == (2, 8)
    assert chromosome_bounds(64, 5) == (5, 8)
    assert chromosome_bounds(50, 3) == (3, 8)
    with pytest.raises(InfeasibleBoundsError):
        chromosome_bounds(16, 5)


@settings(max_examples=60, deadline=None)
@given(
    planes=st.integers(2, 9),
    per_plane=st.integers(2, 9),
    l=st.integers(1, 9),
    w=st.integers(1, 9),
)
def test_uniform_map_is_a_partition(planes, per_plane, l, w):
    m = uniform_map(planes, per_plane, l, w)
    m.validate_partition()
    assert np.all(m.region_of >= 0)
    assert sorted(m.bounds) == m.region_ids()
    total = sum(len(m.members(r)) for r in m.region_ids())
    assert total == planes * per_plane


def test_uniform_map_brick_shapes():
    m = uniform_map(4, 8, 4, 2)
    # 8 slots / l=4 -> 2 cuts, 4 planes / w=2 -> 2 cuts: 4 regions of 8 sats
    assert m.n_regions == 4
    assert all(len(m.members(r)) == 8 for r in m.region_ids())


def test_uniform_map_trailing_sliver_merges():
    # 5 slots with l=2 would leave a 1-wide sliver; it folds into the last brick
    m = uniform_map(2, 5, 2, 2)
    sizes = sorted(len(m.members(r)) for r in m.region_ids())
    assert sum(sizes) == 10
    assert min(sizes) == 4  # no 2-satellite sliver region


def test_single_region_map_covers_everything():
    m = single_region_map(3, 4)
    assert m.n_regions == 1
    assert len(m.members(0)) == 12
    assert m.diameter(0) == (3 - 1) + (4 - 1)


def test_diameter_counts_distinct_planes_and_slots():
    m = uniform_map(4, 4, 2, 2)
    assert all(m.diameter(r) == 2 for r in m.region_ids())


def test_boundary_and_neighbor_regions():
    m = uniform_map(4, 4, 2, 2)
    nbrs = m.neighbor_regions(0)
    assert nbrs == sorted(nbrs)
    assert 0 not in nbrs
    for other in nbrs:
        sats = m.boundary_sats(0, other)
        assert sats
        assert all(int(m.region_of[s]) == 0 for s in sats)


# -- division search ---------------------------------------------------------------


def sample_fitness(n_sats):
    def fit(l, w):
        # deterministic, non-monotonic surface with an interior optimum
        return -((l - 3.3) ** 2) - (w - 2.6) ** 2 + 0.01 * (l * w) % 7
    return fit


@pytest.mark.parametrize("seed", range(6))
def test_ga_divide_matches_exhaustive(seed):
    fit = sample_fitness(64)
    want = exhaustive_divide(fit, 64, 2, planes=8, per_plane=8)
    got = ga_divide(fit, 64, 2, GaDivConfig(population=20, generations=30), seed,
                    planes=8, per_plane=8)
    assert got == want


def test_exhaustive_divide_tie_break_prefers_small_area():
    # flat fitness: the smallest l*w with the smallest l must win
    want = exhaustive_divide(lambda l, w: 1.0, 36, 2, planes=6, per_plane=6)
    assert want == (2, 2, 1.0)


def test_exhaustive_divide_squares_only():
    calls = []

    def fit(l, w):
        calls.append((l, w))
        return float(l)

    exhaustive_divide(fit, 36, 2, planes=6, per_plane=6, squares_only=True)
    assert all(l == w for l, w in calls)


# -- re-division --------------------------------------------------------------------


def test_apply_redivision_grows_and_keeps_partition():
    base = uniform_map(8, 8, 4, 4)  # 4 regions of 16
    grown = apply_redivision(base, 0, 6, 4, "E", k=2)
    assert grown is not None
    grown.validate_partition()
    assert len(grown.members(0)) > len(base.members(0))
    assert sorted(grown.region_ids()) == sorted(base.region_ids())


def test_apply_redivision_refuses_to_starve_neighbor():
    base = uniform_map(4, 4, 2, 2)
    # growing to the full grid would erase every other region
    assert apply_redivision(base, 0, 4, 4, "E", k=2) is None


@settings(max_examples=40, deadline=None)
@given(
    l=st.integers(2, 6),
    w=st.integers(2, 6),
    direction=st.sampled_from(["N", "S", "E", "W"]),
)
def test_apply_redivision_partition_property(l, w, direction):
    base = uniform_map(8, 8, 4, 4)
    out = apply_redivision(base, 1, l, w, direction, k=2)
    if out is None:
        return
    out.validate_partition()
    assert sum(len(out.members(r)) for r in out.region_ids()) == 64
    # every region keeps at least k distinct planes and slots
    for r in out.region_ids():
        assert out.diameter(r) >= 0
        assert len(out.members(r)) > 0


def test_ga_redivide_returns_feasible_best():
    base = uniform_map(8, 8, 4, 4)

    def fit(m):
        return float(len(m.members(1)))

    new_map, (l, w, d), fitness = ga_redivide(
        base, 1, fit, k=2, cfg=GaDivConfig(population=8, generations=6), seed=0)
    new_map.validate_partition()
    assert fitness == float(len(new_map.members(1)))
    assert fitness >= float(len(base.members(1)))


def test_ga_redivide_raises_when_infeasible():
    base = uniform_map(2, 2, 1, 1)  # 4 single-satellite regions, nothing can move
    with pytest.raises(NoFeasibleResizeError):
        ga_redivide(base, 0, lambda m: 0.0, k=2,
                    cfg=GaDivConfig(population=4, generations=2), seed=0)


# -- triggers -----------------------------------------------------------------------


def stats_map():
    m = uniform_map(4, 4, 2, 2)
    for r in m.region_ids():
        m.load_stats[r] = RegionStats(0.05, 180.0, 1.5, True)
    return m


def test_exchange_neighborhood_digests():
    m = stats_map()
    digests = exchange_neighborhood(m, 0)
    assert digests
    for d, dg in digests.items():
        assert dg.region_id != 0
        assert dg.avg_delay == 180.0
    # a lone region has nobody to exchange with
    assert exchange_neighborhood(single_region_map(4, 4), 0) == {}


def test_should_redivide_failure_rate_trigger():
    m = stats_map()
    m.load_stats[0] = RegionStats(0.3, 180.0, 1.5, True)
    assert should_redivide(0, m, thr_tfr=0.2, delay_factor=2.0)
    m.load_stats[0] = RegionStats(0.1, 180.0, 1.5, True)
    assert not should_redivide(0, m, thr_tfr=0.2, delay_factor=2.0)


def test_should_redivide_delay_trigger():
    m = stats_map()
    m.load_stats[0] = RegionStats(0.0, 400.0, 1.5, True)
    # neighbors average 180 ms; 400 > 2 * 180
    assert should_redivide(0, m, thr_tfr=0.5, delay_factor=2.0)
    m.load_stats[0] = RegionStats(0.0, 300.0, 1.5, True)
    assert not should_redivide(0, m, thr_tfr=0.5, delay_factor=2.0)


def test_should_redivide_needs_stats():
    m = uniform_map(4, 4, 2, 2)
    assert not should_redivide(0, m, 0.2, 2.0)
    m.load_stats[0] = RegionStats(0.9, 500.0, 1.5, False)  # unpopulated
    assert not should_redivide(0, m, 0.2, 2.0)
