import numpy as np
import pytest

from tgh import sh
from tgh import gaussians as ga
from tgh.gaussians import Gaussian4D

from conftest import make_random_gaussian, random_unit


def unit_dirs(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_zero_residual_is_direction_independent(rng):
    g = Gaussian4D(mu=np.zeros(4), scale=np.ones(4),
                   rotor_left=ga.identity_rotor(), rotor_right=ga.identity_rotor(),
                   base_color=np.array([0.3, 0.5, 0.7]))
    colors = np.stack([ga.eval_color(g, d) for d in unit_dirs(rng, 100)])
    assert np.max(np.abs(colors - colors[0])) == 0.0
    assert np.allclose(colors[0], [0.3, 0.5, 0.7])


def test_degree1_z_coefficient_front_back_difference():
    # basis (l=1, m=0) = C1 * z; layout index 1, channel-interleaved
    k = 0.05
    coeffs = np.zeros(45)
    coeffs[1 * 3:1 * 3 + 3] = k
    g = Gaussian4D(mu=np.zeros(4), scale=np.ones(4),
                   rotor_left=ga.identity_rotor(), rotor_right=ga.identity_rotor(),
                   base_color=np.full(3, 0.5), sh_residual=coeffs)
    up = ga.eval_color(g, [0.0, 0.0, 1.0])
    down = ga.eval_color(g, [0.0, 0.0, -1.0])
    assert np.allclose(up - down, 2.0 * k * 0.4886025119, atol=1e-9)


def test_band_parity_under_antipodal_directions(rng):
    # even bands are invariant under d -> -d, odd bands negate
    for _ in range(20):
        coeffs = rng.normal(size=(15, 3))
        d = unit_dirs(rng, 1)[0]
        for band, parity in ((1, -1.0), (2, 1.0), (3, -1.0)):
            c = np.zeros((15, 3))
            c[sh.BAND_SLICES[band]] = coeffs[sh.BAND_SLICES[band]]
            plus = sh.eval_residual(c.ravel(), d)
            minus = sh.eval_residual(c.ravel(), -d)
            assert np.allclose(minus, parity * plus, atol=1e-12)


def test_basis_matches_polynomial_table(rng):
    # independent evaluation straight from the standard real SH polynomials
    x, y, z = unit_dirs(rng, 1)[0]
    expected = np.array([
        -0.4886025119029199 * y,
        0.4886025119029199 * z,
        -0.4886025119029199 * x,
        1.0925484305920792 * x * y,
        -1.0925484305920792 * y * z,
        0.31539156525252005 * (2 * z * z - x * x - y * y),
        -1.0925484305920792 * x * z,
        0.5462742152960396 * (x * x - y * y),
        -0.5900435899266435 * y * (3 * x * x - y * y),
        2.890611442640554 * x * y * z,
        -0.4570457994644658 * y * (4 * z * z - x * x - y * y),
        0.3731763325901154 * z * (2 * z * z - 3 * x * x - 3 * y * y),
        -0.4570457994644658 * x * (4 * z * z - x * x - y * y),
        1.445305721320277 * z * (x * x - y * y),
        -0.5900435899266435 * x * (x * x - 3 * y * y),
    ])
    assert np.allclose(sh.eval_basis([x, y, z]), expected, atol=1e-14)


def test_basis_grad_matches_finite_differences(rng):
    eps = 1e-6
    for _ in range(10):
        d = rng.normal(size=3)  # gradient is of the raw polynomial, no unit constraint
        g = sh.eval_basis_grad(d)
        for k in range(3):
            dp = d.copy(); dp[k] += eps
            dm = d.copy(); dm[k] -= eps
            fd = (sh.eval_basis(dp) - sh.eval_basis(dm)) / (2 * eps)
            assert np.allclose(g[:, k], fd, atol=1e-7)


def test_eval_color_clamps(rng):
    g = make_random_gaussian(rng)
    g.base_color = np.array([1.5, -0.5, 0.5])
    g.sh_residual = np.zeros(45)
    assert np.allclose(ga.eval_color(g, [0, 0, 1.0]), [1.0, 0.0, 0.5])
