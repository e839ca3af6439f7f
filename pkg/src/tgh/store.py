"""Id-addressed columnar storage for Gaussian parameters.

Parameters live in preallocated numpy arrays (one column per field) so the
hot path can gather a working set into contiguous batches without touching
Python objects. Rows freed by removal are recycled; ids are never reused.
"""

import numpy as np

from . import sh
from .errors import NotFoundError
from .gaussians import Gaussian4D


class GaussianBatch:
    """A contiguous snapshot of parameters for a list of ids."""

    __slots__ = ("ids", "mu", "scale", "rotor_left", "rotor_right",
                 "opacity", "base_color", "sh_residual")

    def __init__(self, ids, mu, scale, rotor_left, rotor_right, opacity,
                 base_color, sh_residual):
        self.ids = ids
        self.mu = mu
        self.scale = scale
        self.rotor_left = rotor_left
        self.rotor_right = rotor_right
        self.opacity = opacity
        self.base_color = base_color
        self.sh_residual = sh_residual

    def __len__(self):
        return len(self.ids)


class GaussianStore:
    def __init__(self, capacity=256):
        self._alloc(max(capacity, 16))
        self._row_of = {}          # id -> row
        self._id_of_row = np.full(self.capacity, -1, dtype=np.int64)
        self._free = []
        self._top = 0              # rows [0, top) ever used
        self._next_id = 0

    def _alloc(self, capacity):
        self.capacity = capacity
        self.mu = np.zeros((capacity, 4))
        self.scale = np.zeros((capacity, 4))
        self.rotor_left = np.zeros((capacity, 4))
        self.rotor_right = np.zeros((capacity, 4))
        self.opacity = np.zeros(capacity)
        self.base_color = np.zeros((capacity, 3))
        self.sh_residual = np.zeros((capacity, sh.RESIDUAL_COEFFS))

    def _grow(self, needed):
        new_cap = self.capacity
        while new_cap < needed:
            new_cap *= 2
        for name in ("mu", "scale", "rotor_left", "rotor_right",
                     "opacity", "base_color", "sh_residual"):
            old = getattr(self, name)
            fresh = np.zeros((new_cap,) + old.shape[1:])
            fresh[:self._top] = old[:self._top]
            setattr(self, name, fresh)
        grown_ids = np.full(new_cap, -1, dtype=np.int64)
        grown_ids[:self._top] = self._id_of_row[:self._top]
        self._id_of_row = grown_ids
        self.capacity = new_cap

    def __len__(self):
        return len(self._row_of)

    def __contains__(self, gid):
        return gid in self._row_of

    @property
    def ids(self):
        return sorted(self._row_of)

    def live_rows(self):
        """Rows currently holding a Gaussian, ascending."""
        rows = self._id_of_row[:self._top]
        return np.flatnonzero(rows >= 0)

    def row_of(self, gid):
        try:
            return self._row_of[gid]
        except KeyError:
            raise NotFoundError(f"unknown Gaussian id {gid}") from None

    def rows_of(self, gids):
        return np.array([self.row_of(g) for g in gids], dtype=np.intp)

    def id_at_row(self, row):
        return int(self._id_of_row[row])

    def _take_row(self):
        if self._free:
            return self._free.pop()
        if self._top >= self.capacity:
            self._grow(self._top + 1)
        row = self._top
        self._top += 1
        return row

    def insert(self, g: Gaussian4D):
        """Store one primitive, returning its fresh id."""
        return self.insert_arrays(g.mu[None], g.scale[None], g.rotor_left[None],
                                  g.rotor_right[None], np.array([g.opacity]),
                                  g.base_color[None], g.sh_residual[None])[0]

    def insert_arrays(self, mu, scale, rotor_left, rotor_right, opacity,
                      base_color, sh_residual):
        """Bulk insert; arrays share the leading dimension. Returns new ids."""
        n = len(mu)
        rows = np.array([self._take_row() for _ in range(n)], dtype=np.intp)
        self.mu[rows] = mu
        self.scale[rows] = scale
        self.rotor_left[rows] = rotor_left
        self.rotor_right[rows] = rotor_right
        self.opacity[rows] = opacity
        self.base_color[rows] = base_color
        self.sh_residual[rows] = sh_residual
        ids = np.arange(self._next_id, self._next_id + n, dtype=np.int64)
        self._next_id += n
        for gid, row in zip(ids, rows):
            self._row_of[int(gid)] = int(row)
            self._id_of_row[row] = gid
        return [int(g) for g in ids]

    def remove(self, gid):
        row = self.row_of(gid)
        del self._row_of[gid]
        self._id_of_row[row] = -1
        self.sh_residual[row] = 0.0  # keep freed rows exactly diffuse
        self._free.append(row)

    def get(self, gid):
        row = self.row_of(gid)
        return Gaussian4D(mu=self.mu[row].copy(), scale=self.scale[row].copy(),
                          rotor_left=self.rotor_left[row].copy(),
                          rotor_right=self.rotor_right[row].copy(),
                          opacity=float(self.opacity[row]),
                          base_color=self.base_color[row].copy(),
                          sh_residual=self.sh_residual[row].copy())

    def gather(self, gids):
        """Copy the parameters of the given ids into a contiguous batch."""
        rows = self.rows_of(gids)
        return GaussianBatch(ids=np.asarray(gids, dtype=np.int64),
                             mu=self.mu[rows], scale=self.scale[rows],
                             rotor_left=self.rotor_left[rows],
                             rotor_right=self.rotor_right[rows],
                             opacity=self.opacity[rows],
                             base_color=self.base_color[rows],
                             sh_residual=self.sh_residual[rows])
