"""Pinhole camera: intrinsics, world-to-camera extrinsics, image size."""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray          # (3, 3) world-to-camera
    translation: np.ndarray       # (3,)
    width: int
    height: int
    near: float = 0.01
    far: float = 1000.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise InvalidParameterError("camera requires 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError("image size must be positive")
        err = np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3)))
        if err > 1e-6:
            raise InvalidParameterError(f"rotation not orthonormal (err={err:.2e})")

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


def orthonormalize(rotation):
    """Project a near-rotation onto SO(3) via SVD."""
    u, _, vt = np.linalg.svd(np.asarray(rotation, dtype=np.float64).reshape(3, 3))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def look_at(position, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation/translation for a camera at `position`
    looking toward `target` (camera +z forward, +x right, +y down)."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-12:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        n = np.linalg.norm(right)
    right = right / n
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=0)
    translation = -rotation @ position
    return rotation, translation
