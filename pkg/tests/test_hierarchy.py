import math
import time

import numpy as np
import pytest

from tgh import gaussians as ga
from tgh.errors import InvalidParameterError, NotFoundError, OutOfRangeError
from tgh.gaussians import Gaussian4D, InfluenceRange
from tgh.hierarchy import GLOBAL_SEGMENT, TemporalHierarchy, build

from conftest import make_random_gaussian


def brute_force_placement(h, start, end):
    """Scan every (level, segment) pair; deepest containing segment wins."""
    best = GLOBAL_SEGMENT
    for lv in h.levels:
        n = np.arange(len(lv.segments))
        a = lv.offset + n * lv.seg_length
        b = lv.offset + (n + 1) * lv.seg_length
        hits = np.flatnonzero((a <= start) & (end <= b))
        if hits.size:
            best = (lv.index, int(hits[0]))
    return best


def random_ranges(rng, n, duration):
    centers = rng.uniform(-5.0, duration + 5.0, size=n)
    radii = np.exp(rng.uniform(np.log(1e-4), np.log(duration), size=n))
    return np.stack([centers - radii, centers + radii], axis=1)


def time_gaussian(mu_t, radius, o_th=0.05):
    """Identity-rotor Gaussian whose influence radius at o_th is `radius`."""
    s_t = radius / math.sqrt(-2.0 * math.log(o_th))
    return Gaussian4D(mu=np.array([0.0, 0.0, 0.0, mu_t]),
                      scale=np.array([1.0, 1.0, 1.0, s_t]),
                      rotor_left=ga.identity_rotor(), rotor_right=ga.identity_rotor(),
                      opacity=0.5)


class TestGeometry:
    def test_reference_level_sizes(self):
        h = build(duration=40.0, root_length=10.0, num_levels=9)
        assert h.levels[0].seg_length == 10.0
        assert h.levels[8].seg_length == 10.0 / 256 == 0.0390625
        assert h.levels[0].offset == -2.5
        assert h.levels[1].offset == -1.25
        assert h.levels[2].offset == -0.625

    def test_single_level_segment_count(self):
        h = build(duration=10.0, root_length=10.0, num_levels=1)
        assert len(h.levels) == 1
        assert h.levels[0].offset == -2.5
        assert h.segment_count(0) == math.ceil(12.5 / 10.0) == 2

    def test_segments_cover_duration(self):
        for T in (10.0, 40.0, 123.4):
            h = build(duration=T)
            for lv in h.levels:
                first, _ = lv.span(0)
                _, last = lv.span(len(lv.segments) - 1)
                assert first <= 0.0 and last >= T

    def test_invalid_parameters(self):
        for kwargs in (dict(duration=0.0), dict(duration=-1.0),
                       dict(duration=10.0, root_length=0.0),
                       dict(duration=10.0, num_levels=0),
                       dict(duration=10.0, num_levels=40),
                       dict(duration=10.0, o_th=1.5)):
            with pytest.raises(InvalidParameterError):
                build(**kwargs)


class TestPlace:
    def test_mid_scale_range(self):
        # [3.0, 4.2] straddles the level-3 boundary at 3.4375 but fits the
        # level-2 segment [1.875, 4.375): deepest containing wins
        h = build(duration=40.0)
        got = h.place(0, InfluenceRange(3.0, 4.2, 0.6))
        assert got == brute_force_placement(h, 3.0, 4.2) == (2, 1)

    def test_short_early_range(self):
        h = build(duration=40.0)
        got = h.place(0, InfluenceRange(0.1, 0.2, 0.05))
        assert got == brute_force_placement(h, 0.1, 0.2) == (5, 0)

    def test_oversized_range_goes_global(self):
        h = build(duration=40.0)
        assert h.place(0, InfluenceRange(-5.0, 45.0, 25.0)) == GLOBAL_SEGMENT
        assert 0 in h.global_segment

    def test_pre_start_range_goes_global(self):
        h = build(duration=40.0)
        assert h.place(0, InfluenceRange(-4.0, -3.0, 0.5)) == GLOBAL_SEGMENT

    def test_agrees_with_brute_force(self, rng):
        h = build(duration=40.0)
        for i, (a, b) in enumerate(random_ranges(rng, 2000, 40.0)):
            assert h.place(i, InfluenceRange(a, b, (b - a) / 2)) == \
                brute_force_placement(h, a, b)

    def test_duplicate_and_inverted_rejected(self):
        h = build(duration=40.0)
        h.place(7, InfluenceRange(1.0, 2.0, 0.5))
        with pytest.raises(InvalidParameterError):
            h.place(7, InfluenceRange(1.0, 2.0, 0.5))
        with pytest.raises(InvalidParameterError):
            h.place(8, InfluenceRange(2.0, 1.0, 0.5))


class TestQuery:
    def test_reference_indices(self):
        h = build(duration=10.0, root_length=10.0, num_levels=3)
        ws = h.query(7.0)
        assert ws.segment_refs == [(0, 0), (1, 1), (2, 3), GLOBAL_SEGMENT]

    def test_t_zero_and_duration_valid(self):
        h = build(duration=40.0)
        for t in (0.0, 40.0):
            ws = h.query(t)
            for level, n in ws.segment_refs[:-1]:
                assert 0 <= n < h.segment_count(level)

    def test_out_of_range(self):
        h = build(duration=40.0)
        for t in (-0.001, 40.001):
            with pytest.raises(OutOfRangeError):
                h.query(t)

    def test_cardinality_independent_of_duration(self):
        for T in (10.0, 100.0, 1000.0, 10000.0):
            h = build(duration=T, num_levels=9)
            for t in (0.0, T / 3, T):
                assert len(h.query(t).segment_refs) == 10

    def test_completeness_against_linear_scan(self, rng):
        h = build(duration=40.0)
        ranges = random_ranges(rng, 500, 40.0)
        for i, (a, b) in enumerate(ranges):
            h.place(i, InfluenceRange(a, b, (b - a) / 2))
        for t in rng.uniform(0.0, 40.0, size=200):
            covered = set(np.flatnonzero((ranges[:, 0] <= t) & (t <= ranges[:, 1])))
            got = set(h.query(t).gaussian_ids.tolist())
            assert covered <= got

    def test_deterministic(self, rng):
        h = build(duration=40.0)
        for i, (a, b) in enumerate(random_ranges(rng, 300, 40.0)):
            h.place(i, InfluenceRange(a, b, (b - a) / 2))
        w1, w2 = h.query(17.3), h.query(17.3)
        assert w1.segment_refs == w2.segment_refs
        assert np.array_equal(w1.gaussian_ids, w2.gaussian_ids)

    def test_query_cost_independent_of_population(self, rng):
        def mean_query_time(h):
            ts = rng.uniform(0.0, h.duration, size=2000)
            t0 = time.perf_counter()
            for t in ts:
                h.query_indices(t)
            return (time.perf_counter() - t0) / len(ts)

        small = build(duration=40.0)
        big = build(duration=40.0)
        for i, (a, b) in enumerate(random_ranges(rng, 1000, 40.0)):
            small.place(i, InfluenceRange(a, b, 1.0))
        for i, (a, b) in enumerate(random_ranges(rng, 200_000, 40.0)):
            big.place(i, InfluenceRange(a, b, 1.0))
        mean_query_time(big)  # warm caches
        assert mean_query_time(big) < 5.0 * mean_query_time(small)


class TestUpdateLevel:
    def test_idempotent_when_unchanged(self):
        h = build(duration=40.0)
        gid = h.insert(time_gaussian(2.5, 2.0))
        before = h.placement_of(gid)
        old, new = h.update_level(gid)
        assert old == new == before == h.placement_of(gid)

    def test_shrunk_sigma_migrates_deeper(self):
        h = build(duration=40.0)
        g = time_gaussian(0.15, 2.0)
        gid = h.insert(g)
        assert h.placement_of(gid) == (0, 0)
        row = h.store.row_of(gid)
        h.store.scale[row, 3] /= 100.0  # radius 2.0 -> 0.02 ... range [0.13, 0.17]
        old, new = h.update_level(gid)
        assert old == (0, 0)
        start, end = h.range_of(gid)
        assert new == brute_force_placement(h, start, end)
        assert new[0] > old[0]
        h.audit()

    def test_spec_migration_to_level_five(self):
        h = build(duration=40.0)
        gid = h.insert(time_gaussian(0.15, 2.0))
        row = h.store.row_of(gid)
        h.store.scale[row, 3] = 0.05 / math.sqrt(-2.0 * math.log(0.05))
        _, new = h.update_level(gid)
        assert new == (5, 0)  # range is now [0.1, 0.2]

    def test_shift_across_level8_boundary(self):
        h = build(duration=40.0)
        gid = h.insert(time_gaussian(1.0, 1e-3))
        level, n = h.placement_of(gid)
        assert level == 8
        row = h.store.row_of(gid)
        h.store.mu[row, 3] += h.levels[8].seg_length
        old, new = h.update_level(gid)
        assert old == (8, n) and new == (8, n + 1)
        start, end = h.range_of(gid)
        assert new == brute_force_placement(h, start, end)

    def test_unknown_id(self):
        h = build(duration=40.0)
        with pytest.raises(NotFoundError):
            h.update_level(123)


class TestInsertRemoveOccupancy:
    def test_insert_remove_restores_state(self, rng):
        h = build(duration=40.0)
        base_ids = [h.insert(make_random_gaussian(rng)) for _ in range(20)]
        _, before = h.occupancy()
        gid = h.insert(make_random_gaussian(rng))
        h.remove(gid)
        _, after = h.occupancy()
        assert before == after
        assert sorted(h.store.ids) == sorted(base_ids)

    def test_remove_unknown(self):
        h = build(duration=40.0)
        with pytest.raises(NotFoundError):
            h.remove(99)

    def test_occupancy_partition(self, rng):
        h = build(duration=40.0)
        for _ in range(300):
            h.insert(make_random_gaussian(rng))
        per_level, per_segment = h.occupancy()
        assert sum(per_level.values()) == len(h) == 300
        assert sum(per_segment.values()) == 300

    def test_histogram_matches_brute_force(self, rng):
        h = build(duration=40.0)
        expected = {}
        for i, (a, b) in enumerate(random_ranges(rng, 10_000, 40.0)):
            h.place(i, InfluenceRange(a, b, (b - a) / 2))
            p = brute_force_placement(h, a, b)
            expected[p] = expected.get(p, 0) + 1
        _, per_segment = h.occupancy()
        got = {k: v for k, v in per_segment.items() if v}
        assert got == expected


class TestAudit:
    def test_partition_after_random_ops(self, rng):
        h = build(duration=40.0)
        alive = []
        for step in range(10_000):
            op = rng.integers(0, 3)
            if op == 0 or not alive:
                g = make_random_gaussian(rng)
                alive.append(h.insert(g))
            elif op == 1:
                gid = alive[int(rng.integers(len(alive)))]
                row = h.store.row_of(gid)
                h.store.mu[row, 3] = rng.uniform(-2, 42)
                h.store.scale[row, 3] = np.exp(rng.uniform(np.log(1e-3), np.log(5)))
                h.update_level(gid)
            else:
                gid = alive.pop(int(rng.integers(len(alive))))
                h.remove(gid)
        h.audit()
        assert len(h) == len(alive)

    def test_audit_catches_corruption(self, rng):
        h = build(duration=40.0)
        gid = h.insert(time_gaussian(2.5, 2.0))
        h.levels[0].segments[0].discard(gid)
        h.levels[0].segments[1].add(gid)
        with pytest.raises(Exception):
            h.audit()


def test_occupancy_rows_cover_population(rng):
    h = build(duration=40.0)
    for _ in range(50):
        h.insert(make_random_gaussian(rng))
    rows = h.occupancy_rows()
    assert sum(r[4] for r in rows) == 50
    for level, n, start, end, count in rows[:-1]:
        assert end > start and count > 0
