"""Sparse view-dependent appearance control.

Residual SH coefficients start at exactly zero. While a Gaussian stays
all-zero, its SH gradient is dropped unless the gradient norm clears the
threshold, so diffuse content never accrues coefficients. Once the
view-dependent share of the population reaches the cutoff ratio the
threshold goes to infinity: the current diffuse set is locked in for good.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError


@dataclass
class AppearanceGate:
    g_th: float = 1e-6          # gradient-norm threshold; +inf once frozen
    lambda_h: float = 0.15      # view-dependent ratio cutoff
    frozen: bool = False

    def __post_init__(self):
        if self.g_th < 0:
            raise InvalidParameterError("g_th must be >= 0")
        if not 0.0 <= self.lambda_h <= 1.0:
            raise InvalidParameterError("lambda_h must lie in [0, 1]")

    def freeze(self):
        self.g_th = math.inf
        self.frozen = True


def gate_gradients(h, grad_h, gate: AppearanceGate):
    """Filtered SH gradients: zeroed where ||g|| < g_th and ||h|| == 0.

    h, grad_h: (45,) or (N, 45). Gradients of view-dependent Gaussians
    (any nonzero coefficient) always pass. Returns a new array; only the SH
    block is ever touched.
    """
    h = np.asarray(h, dtype=np.float64)
    grad_h = np.asarray(grad_h, dtype=np.float64)
    if h.shape != grad_h.shape:
        raise InvalidParameterError("h and grad_h shapes differ")
    squeeze = h.ndim == 1
    if squeeze:
        h, grad_h = h[None], grad_h[None]
    diffuse = ~np.any(h != 0.0, axis=1)
    small = np.linalg.norm(grad_h, axis=1) < gate.g_th
    out = grad_h.copy()
    out[diffuse & small] = 0.0
    return out[0] if squeeze else out


def view_dependent_fraction(h):
    """Share of rows with any nonzero residual coefficient. h: (N, 45)."""
    h = np.asarray(h)
    if len(h) == 0:
        return 0.0
    return float(np.count_nonzero(np.any(h != 0.0, axis=1))) / len(h)


def update_ratio_cutoff(gate: AppearanceGate, fraction):
    """Freeze the gate once the view-dependent fraction reaches lambda_h.

    Freezing is permanent; later calls never revert it. Returns the gate.
    """
    if not gate.frozen and fraction >= gate.lambda_h:
        gate.freeze()
    return gate


def group_by_appearance(ids, h):
    """Partition ids into (diffuse, view_dependent), each ascending.

    ids: sequence of Gaussian ids aligned with the rows of h (N, 45).
    """
    ids = np.asarray(ids, dtype=np.int64)
    h = np.asarray(h)
    vdep_mask = np.any(h != 0.0, axis=1)
    diffuse = np.sort(ids[~vdep_mask])
    vdep = np.sort(ids[vdep_mask])
    return diffuse.tolist(), vdep.tolist()
