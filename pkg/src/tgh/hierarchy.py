"""The temporal hierarchy: levels of disjoint equal-length segments plus one
global segment, each Gaussian living in the shortest segment that contains
its influence range.

Level l has segment length s_l = S / 2^l and a corrected offset of
-S / 2^(l+2) that staggers boundaries across levels. Per-timestamp queries
touch exactly one segment per level (plus global), independent of duration
and population size.

Thread contract: any number of concurrent readers (query, occupancy, audit)
OR a single writer (insert, remove, place, update); enforced internally with
a read/write lock. Materialized working sets are snapshots and stay valid
after later writes.
"""

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from . import gaussians as ga
from .errors import InvalidParameterError, NotFoundError, OutOfRangeError, TGHError
from .gaussians import Gaussian4D, InfluenceRange
from .store import GaussianStore

GLOBAL_LEVEL = -1
GLOBAL_SEGMENT = (GLOBAL_LEVEL, 0)


class AuditError(TGHError):
    """The hierarchy violates a structural invariant."""


class _ReadWriteLock:
    """Readers-writer lock, writer-preferring is not needed at our scale."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    def acquire_read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1

    def release_read(self):
        with self._cond:
            self._readers -= 1
            if self._readers == 0:
                self._cond.notify_all()

    def acquire_write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True

    def release_write(self):
        with self._cond:
            self._writer = False
            self._cond.notify_all()


class _ReadGuard:
    __slots__ = ("lock",)

    def __init__(self, lock):
        self.lock = lock

    def __enter__(self):
        self.lock.acquire_read()

    def __exit__(self, *exc):
        self.lock.release_read()


class _WriteGuard:
    __slots__ = ("lock",)

    def __init__(self, lock):
        self.lock = lock

    def __enter__(self):
        self.lock.acquire_write()

    def __exit__(self, *exc):
        self.lock.release_write()


@dataclass
class Level:
    index: int
    seg_length: float
    offset: float
    segments: list = field(default_factory=list)  # list[set[int]], dense

    def span(self, n):
        return (self.offset + n * self.seg_length,
                self.offset + (n + 1) * self.seg_length)


@dataclass
class WorkingSet:
    """All Gaussians relevant at one timestamp: one segment per level + global."""

    timestamp: float
    segment_refs: list              # [(level, index)] of length num_levels + 1
    gaussian_ids: np.ndarray        # concatenated members, int64


class TemporalHierarchy:
    def __init__(self, duration, root_length=10.0, num_levels=9, o_th=0.05):
        if not (duration > 0 and math.isfinite(duration)):
            raise InvalidParameterError(f"duration must be positive, got {duration}")
        if not (root_length > 0 and math.isfinite(root_length)):
            raise InvalidParameterError(f"root_length must be positive, got {root_length}")
        if not 1 <= int(num_levels) <= 32:
            raise InvalidParameterError(f"num_levels must be in [1, 32], got {num_levels}")
        if not 0.0 < o_th < 1.0:
            raise InvalidParameterError(f"o_th must lie in (0, 1), got {o_th}")
        self.duration = float(duration)
        self.root_length = float(root_length)
        self.num_levels = int(num_levels)
        self.o_th = float(o_th)
        self.levels = []
        for l in range(self.num_levels):
            s_l = self.root_length / (1 << l)
            offset = -self.root_length / (1 << (l + 2))
            count = math.ceil((self.duration - offset) / s_l)
            self.levels.append(Level(index=l, seg_length=s_l, offset=offset,
                                     segments=[set() for _ in range(count)]))
        self.global_segment = set()
        self.store = GaussianStore()
        self._placement = {}        # id -> (level, index)
        self._range = {}            # id -> (start, end)
        self._lock = _ReadWriteLock()

    # ---------------------------------------------------------------- geometry

    def segment_count(self, level):
        return len(self.levels[level].segments)

    def total_segments(self):
        return sum(len(lv.segments) for lv in self.levels) + 1

    def _find_placement(self, start, end):
        """Deepest level whose single segment contains [start, end]; None -> global.

        A segment [a, b) contains the range iff a <= start and end <= b
        (an end exactly on the boundary still fits).
        """
        for lv in reversed(self.levels):
            n = math.floor((start - lv.offset) / lv.seg_length)
            if n < 0 or n >= len(lv.segments):
                continue
            if end <= lv.offset + (n + 1) * lv.seg_length:
                return (lv.index, n)
        return GLOBAL_SEGMENT

    def _segment_set(self, placement):
        if placement == GLOBAL_SEGMENT:
            return self.global_segment
        level, n = placement
        return self.levels[level].segments[n]

    # ------------------------------------------------------------- mutation

    def place(self, gid, rng: InfluenceRange):
        """Insert an id into the shortest containing segment; returns placement."""
        with _WriteGuard(self._lock):
            return self._place_locked(gid, rng.start, rng.end)

    def _place_locked(self, gid, start, end):
        if start > end:
            raise InvalidParameterError("influence range start exceeds end")
        if gid in self._placement:
            raise InvalidParameterError(f"id {gid} is already placed")
        placement = self._find_placement(start, end)
        self._segment_set(placement).add(gid)
        self._placement[gid] = placement
        self._range[gid] = (start, end)
        return placement

    def insert(self, g: Gaussian4D):
        """Store a primitive and place it by its influence range; returns its id."""
        with _WriteGuard(self._lock):
            gid = self.store.insert(g)
            rng = ga.influence_range(g, self.o_th)
            self._place_locked(gid, rng.start, rng.end)
            return gid

    def insert_batch(self, mu, scale, rotor_left, rotor_right, opacity,
                     base_color, sh_residual):
        """Bulk insert with vectorized influence-range computation."""
        with _WriteGuard(self._lock):
            ids = self.store.insert_arrays(mu, scale, rotor_left, rotor_right,
                                           opacity, base_color, sh_residual)
            sigma_t = ga.batch_temporal_variance(scale, rotor_left, rotor_right)
            radius = ga.influence_radius(sigma_t, self.o_th)
            centers = np.asarray(mu)[:, 3]
            for gid, c, r in zip(ids, centers, radius):
                self._place_locked(gid, float(c - r), float(c + r))
            return ids

    def remove(self, gid):
        with _WriteGuard(self._lock):
            if gid not in self._placement:
                raise NotFoundError(f"unknown Gaussian id {gid}")
            self._segment_set(self._placement.pop(gid)).discard(gid)
            del self._range[gid]
            if gid in self.store:
                self.store.remove(gid)

    def update_level(self, gid):
        """Re-place one stored Gaussian after its parameters changed.

        Returns (old_placement, new_placement); O(num_levels).
        """
        with _WriteGuard(self._lock):
            return self._update_locked(gid)

    def update_levels(self, gids):
        """Bulk re-placement under a single lock acquisition."""
        with _WriteGuard(self._lock):
            return [self._update_locked(g) for g in gids]

    def _update_locked(self, gid):
        if gid not in self._placement:
            raise NotFoundError(f"unknown Gaussian id {gid}")
        row = self.store.row_of(gid)
        sigma_t = float(ga.batch_temporal_variance(self.store.scale[row],
                                                   self.store.rotor_left[row],
                                                   self.store.rotor_right[row]))
        r = float(ga.influence_radius(sigma_t, self.o_th))
        center = float(self.store.mu[row, 3])
        start, end = center - r, center + r
        old = self._placement[gid]
        new = self._find_placement(start, end)
        if new != old:
            self._segment_set(old).discard(gid)
            self._segment_set(new).add(gid)
            self._placement[gid] = new
        self._range[gid] = (start, end)
        return old, new

    # -------------------------------------------------------------- queries

    def placement_of(self, gid):
        with _ReadGuard(self._lock):
            if gid not in self._placement:
                raise NotFoundError(f"unknown Gaussian id {gid}")
            return self._placement[gid]

    def range_of(self, gid):
        with _ReadGuard(self._lock):
            if gid not in self._range:
                raise NotFoundError(f"unknown Gaussian id {gid}")
            return self._range[gid]

    def __len__(self):
        return len(self._placement)

    def query(self, t):
        """Working set at timestamp t: one segment per level plus global, O(L)."""
        t = float(t)
        if not 0.0 <= t <= self.duration:
            raise OutOfRangeError(f"t={t} outside [0, {self.duration}]")
        with _ReadGuard(self._lock):
            refs = []
            chunks = []
            for lv in self.levels:
                n = math.floor((t - lv.offset) / lv.seg_length)
                n = min(max(n, 0), len(lv.segments) - 1)
                refs.append((lv.index, n))
                chunks.append(sorted(lv.segments[n]))
            refs.append(GLOBAL_SEGMENT)
            chunks.append(sorted(self.global_segment))
            ids = np.array([g for c in chunks for g in c], dtype=np.int64)
            return WorkingSet(timestamp=t, segment_refs=refs, gaussian_ids=ids)

    def query_indices(self, t):
        """Per-level segment indices only (no member enumeration)."""
        t = float(t)
        if not 0.0 <= t <= self.duration:
            raise OutOfRangeError(f"t={t} outside [0, {self.duration}]")
        return [min(max(math.floor((t - lv.offset) / lv.seg_length), 0),
                    len(lv.segments) - 1) for lv in self.levels]

    def materialize(self, ws: WorkingSet):
        """Gather the working set's parameters into a contiguous batch."""
        return self.store.gather(ws.gaussian_ids)

    def occupancy(self):
        """Gaussian counts per level (index -1 = global) and per segment."""
        with _ReadGuard(self._lock):
            per_level = {lv.index: sum(len(s) for s in lv.segments)
                         for lv in self.levels}
            per_level[GLOBAL_LEVEL] = len(self.global_segment)
            per_segment = {(lv.index, n): len(seg)
                           for lv in self.levels for n, seg in enumerate(lv.segments)}
            per_segment[GLOBAL_SEGMENT] = len(self.global_segment)
            return per_level, per_segment

    def occupancy_rows(self, include_empty=False):
        """(level, segment_index, start, end, count) rows for diagnostics."""
        with _ReadGuard(self._lock):
            rows = []
            for lv in self.levels:
                for n, seg in enumerate(lv.segments):
                    if seg or include_empty:
                        a, b = lv.span(n)
                        rows.append((lv.index, n, a, b, len(seg)))
            rows.append((GLOBAL_LEVEL, 0, -math.inf, math.inf, len(self.global_segment)))
            return rows

    # ---------------------------------------------------------------- audit

    def audit(self):
        """Verify partition, containment and minimality for every resident.

        Raises AuditError on the first violation.
        """
        with _ReadGuard(self._lock):
            seen = 0
            for lv in self.levels:
                for n, seg in enumerate(lv.segments):
                    for gid in seg:
                        if self._placement.get(gid) != (lv.index, n):
                            raise AuditError(f"id {gid} in segment ({lv.index}, {n}) "
                                             f"but recorded at {self._placement.get(gid)}")
                    seen += len(seg)
            for gid in self.global_segment:
                if self._placement.get(gid) != GLOBAL_SEGMENT:
                    raise AuditError(f"id {gid} in global but recorded at "
                                     f"{self._placement.get(gid)}")
            seen += len(self.global_segment)
            if seen != len(self._placement):
                raise AuditError(f"{seen} segment members vs {len(self._placement)} placements")
            for gid, placement in self._placement.items():
                start, end = self._range[gid]
                expected = self._find_placement(start, end)
                if placement != expected:
                    raise AuditError(f"id {gid} placed at {placement}, "
                                     f"deepest containing segment is {expected}")
                if placement != GLOBAL_SEGMENT:
                    a, b = self.levels[placement[0]].span(placement[1])
                    if not (a <= start and end <= b):
                        raise AuditError(f"id {gid} range [{start}, {end}] outside "
                                         f"segment span [{a}, {b})")


def build(duration, root_length=10.0, num_levels=9, o_th=0.05):
    """Construct an empty hierarchy (module-level convenience)."""
    return TemporalHierarchy(duration, root_length, num_levels, o_th)
