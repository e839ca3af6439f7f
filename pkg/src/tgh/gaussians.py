"""4D Gaussian primitives and the closed-form math on them.

A primitive is an anisotropic Gaussian over (x, y, z, t). Its 4x4 covariance
comes from a pair of unit quaternions (the left/right isoclinic factors of a
4D rotation) and four positive scales. Conditioning on a timestamp yields the
3D splat actually rendered, with the temporal marginal modulating opacity.

All functions here are pure; batch variants operate on stacked arrays and the
scalar API wraps them for single primitives.
"""

from dataclasses import dataclass, field

import numpy as np

from . import sh
from .errors import InvalidParameterError

# floors applied to scales before covariance construction: spatial axes in
# scene units, temporal axis in seconds
MIN_SCALE_SPATIAL = 1e-6
MIN_SCALE_TEMPORAL = 1e-4

SCALE_FLOOR = np.array([MIN_SCALE_SPATIAL] * 3 + [MIN_SCALE_TEMPORAL])


@dataclass
class Gaussian4D:
    """One scene primitive: 4D mean/scale, rotor pair, opacity and appearance."""

    mu: np.ndarray                 # (4,) x, y, z in scene units; t in seconds
    scale: np.ndarray              # (4,) positive
    rotor_left: np.ndarray         # (4,) unit quaternion (w, x, y, z)
    rotor_right: np.ndarray        # (4,) unit quaternion
    opacity: float = 0.1
    base_color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sh_residual: np.ndarray = field(default_factory=lambda: np.zeros(sh.RESIDUAL_COEFFS))

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(4)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(4)
        self.rotor_left = np.asarray(self.rotor_left, dtype=np.float64).reshape(4)
        self.rotor_right = np.asarray(self.rotor_right, dtype=np.float64).reshape(4)
        self.base_color = np.asarray(self.base_color, dtype=np.float64).reshape(3)
        self.sh_residual = np.asarray(self.sh_residual, dtype=np.float64).reshape(sh.RESIDUAL_COEFFS)

    @property
    def is_diffuse(self):
        return not np.any(self.sh_residual)


@dataclass
class ConditionedGaussian3D:
    """Spatial slice of a 4D Gaussian at a fixed timestamp."""

    mean3: np.ndarray      # (3,)
    cov3: np.ndarray       # (3, 3) symmetric PSD
    opacity_t: float       # temporally modulated opacity


@dataclass
class InfluenceRange:
    """Time interval where the temporal opacity factor exceeds the threshold."""

    start: float
    end: float
    radius: float

    @property
    def center(self):
        return 0.5 * (self.start + self.end)


def identity_rotor():
    return np.array([1.0, 0.0, 0.0, 0.0])


def _normalize_rows(q):
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0) or not np.all(np.isfinite(n)):
        raise InvalidParameterError("rotor has zero or non-finite norm")
    return q / n


def left_isoclinic(q):
    """Left-isoclinic 4x4 rotation factor of unit quaternions. q: (..., 4)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, -z, y], axis=-1),
        np.stack([y, z, w, -x], axis=-1),
        np.stack([z, -y, x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def right_isoclinic(q):
    """Right-isoclinic 4x4 rotation factor of unit quaternions. q: (..., 4)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, z, -y], axis=-1),
        np.stack([y, -z, w, x], axis=-1),
        np.stack([z, y, -x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def batch_rotation(rotor_left, rotor_right):
    """4D rotation matrices R = L(q_l) @ R(q_r), rotors renormalized. (..., 4, 4)."""
    ql = _normalize_rows(np.asarray(rotor_left, dtype=np.float64))
    qr = _normalize_rows(np.asarray(rotor_right, dtype=np.float64))
    return left_isoclinic(ql) @ right_isoclinic(qr)


def clamp_scales(scale):
    """Apply the per-axis positive floors (spatial 1e-6, temporal 1e-4 s)."""
    return np.maximum(np.asarray(scale, dtype=np.float64), SCALE_FLOOR)


def batch_covariance(mu, scale, rotor_left, rotor_right):
    """Covariances Sigma = R S S^T R^T for stacked parameters. Returns (..., 4, 4)."""
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(scale))
            and np.all(np.isfinite(rotor_left)) and np.all(np.isfinite(rotor_right))):
        raise InvalidParameterError("non-finite Gaussian parameters")
    R = batch_rotation(rotor_left, rotor_right)
    s = clamp_scales(scale)
    M = R * s[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def build_covariance(g: Gaussian4D):
    """4x4 covariance of a single primitive."""
    return batch_covariance(g.mu, g.scale, g.rotor_left, g.rotor_right)


def batch_temporal_variance(scale, rotor_left, rotor_right):
    """sigma_t = Sigma[3, 3] without forming the full covariance."""
    R = batch_rotation(rotor_left, rotor_right)
    s = clamp_scales(scale)
    row = R[..., 3, :] * s
    return np.sum(row * row, axis=-1)


def marginal_opacity(g: Gaussian4D, t):
    """Temporal marginal opacity o * exp(-(t - mu_t)^2 / (2 sigma_t))."""
    sigma_t = batch_temporal_variance(g.scale, g.rotor_left, g.rotor_right)
    dt = np.asarray(t, dtype=np.float64) - g.mu[3]
    return g.opacity * np.exp(-0.5 * dt * dt / sigma_t)


def influence_radius(sigma_t, o_th):
    """Radius where the normalized temporal factor drops to o_th."""
    if not 0.0 < o_th < 1.0:
        raise InvalidParameterError(f"o_th must lie in (0, 1), got {o_th}")
    return np.sqrt(np.log(o_th) / -0.5 * sigma_t)


def influence_range(g: Gaussian4D, o_th):
    """Interval around mu_t where exp(-(t-mu_t)^2/(2 sigma_t)) >= o_th."""
    sigma_t = batch_temporal_variance(g.scale, g.rotor_left, g.rotor_right)
    r = float(influence_radius(sigma_t, o_th))
    mu_t = float(g.mu[3])
    return InfluenceRange(start=mu_t - r, end=mu_t + r, radius=r)


def batch_condition_at_time(mu, cov, t):
    """Condition stacked 4D Gaussians on a timestamp.

    mu: (N, 4), cov: (N, 4, 4), t: scalar.
    Returns (mean3 (N, 3), cov3 (N, 3, 3), w_t (N,)) where w_t is the
    normalized temporal factor in (0, 1].
    """
    mu = np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    v = cov[..., :3, 3]
    sigma_t = cov[..., 3, 3]
    dt = float(t) - mu[..., 3]
    mean3 = mu[..., :3] + v * (dt / sigma_t)[..., None]
    cov3 = cov[..., :3, :3] - v[..., :, None] * v[..., None, :] / sigma_t[..., None, None]
    cov3 = 0.5 * (cov3 + np.swapaxes(cov3, -1, -2))
    w_t = np.exp(-0.5 * dt * dt / sigma_t)
    return mean3, cov3, w_t


def condition_at_time(g: Gaussian4D, t):
    """3D slice of a single primitive at time t."""
    cov = build_covariance(g)
    mean3, cov3, w_t = batch_condition_at_time(g.mu[None], cov[None], t)
    return ConditionedGaussian3D(mean3=mean3[0], cov3=cov3[0],
                                 opacity_t=float(g.opacity * w_t[0]))


def eval_color(g: Gaussian4D, view_dir):
    """Base color plus residual SH, clamped to [0, 1]. view_dir must be unit."""
    d = np.asarray(view_dir, dtype=np.float64)
    residual = sh.eval_residual(g.sh_residual, d)
    return np.clip(g.base_color + residual, 0.0, 1.0)
