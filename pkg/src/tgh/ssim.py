"""Structural similarity with an 11x11 Gaussian window (sigma 1.5) on the
valid interior region, plus its analytic image gradient.

C1 = 0.01^2 and C2 = 0.03^2 assume pixel values in [0, 1].
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidParameterError

WINDOW = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _kernel():
    x = np.arange(WINDOW) - (WINDOW - 1) / 2.0
    k = np.exp(-0.5 * (x / SIGMA) ** 2)
    return k / k.sum()

KERNEL = _kernel()


def _filt_valid(img):
    """Separable windowed mean, valid region only: (H, W) -> (H-10, W-10)."""
    out = sliding_window_view(img, WINDOW, axis=0) @ KERNEL
    return sliding_window_view(out, WINDOW, axis=1) @ KERNEL


def _filt_adjoint(grad):
    """Adjoint of _filt_valid (the window is symmetric): (H-10, W-10) -> (H, W)."""
    pad = WINDOW - 1
    padded = np.pad(grad, ((pad, pad), (pad, pad)))
    return _filt_valid(padded)


def ssim(img, ref, grad=False):
    """Mean SSIM over channels and the valid region.

    With grad=True also returns d(mean SSIM)/d(img) as an image-shaped array.
    """
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape or img.ndim != 3:
        raise InvalidParameterError("images must share an (H, W, C) shape")
    h, w, channels = img.shape
    if h < WINDOW or w < WINDOW:
        raise InvalidParameterError(f"images must be at least {WINDOW}x{WINDOW} for SSIM")

    total = 0.0
    grad_img = np.zeros_like(img) if grad else None
    n_valid = (h - WINDOW + 1) * (w - WINDOW + 1)
    for ch in range(channels):
        x, y = img[..., ch], ref[..., ch]
        mu_x, mu_y = _filt_valid(x), _filt_valid(y)
        sxx = _filt_valid(x * x) - mu_x * mu_x
        syy = _filt_valid(y * y) - mu_y * mu_y
        sxy = _filt_valid(x * y) - mu_x * mu_y
        a1 = 2 * mu_x * mu_y + C1
        a2 = 2 * sxy + C2
        b1 = mu_x * mu_x + mu_y * mu_y + C1
        b2 = sxx + syy + C2
        s = (a1 * a2) / (b1 * b2)
        total += s.mean()
        if grad:
            scale = 1.0 / (n_valid * channels)
            ds_da1 = a2 / (b1 * b2)
            ds_da2 = a1 / (b1 * b2)
            ds_db1 = -s / b1
            ds_db2 = -s / b2
            g_mu = (ds_da1 * 2 * mu_y + ds_db1 * 2 * mu_x) * scale
            g_sx = ds_db2 * scale
            g_xy = ds_da2 * 2 * scale
            grad_img[..., ch] = (
                _filt_adjoint(g_mu)
                + 2 * x * _filt_adjoint(g_sx) - 2 * _filt_adjoint(g_sx * mu_x)
                + y * _filt_adjoint(g_xy) - _filt_adjoint(g_xy * mu_y)
            )
    mean_ssim = total / channels
    return (mean_ssim, grad_img) if grad else mean_ssim
