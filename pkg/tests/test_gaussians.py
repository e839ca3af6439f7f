import numpy as np
import pytest

from tgh import gaussians as ga
from tgh.errors import InvalidParameterError
from tgh.gaussians import Gaussian4D

from conftest import make_random_gaussian, random_unit


def hamilton(p, q):
    """Independent quaternion product for the rotation oracle."""
    w1, x1, y1, z1 = p
    w2, x2, y2, z2 = q
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def rotation_oracle(ql, qr):
    """Columns of L(ql) are ql*e_i; columns of R(qr) are e_i*qr."""
    ql = ql / np.linalg.norm(ql)
    qr = qr / np.linalg.norm(qr)
    eye = np.eye(4)
    L = np.stack([hamilton(ql, e) for e in eye], axis=1)
    R = np.stack([hamilton(e, qr) for e in eye], axis=1)
    return L @ R


def covariance_oracle(g):
    R = rotation_oracle(g.rotor_left, g.rotor_right)
    S = np.diag(np.maximum(g.scale, ga.SCALE_FLOOR))
    M = R @ S
    return M @ M.T


def identity_gaussian(**kw):
    defaults = dict(mu=np.zeros(4), scale=np.ones(4),
                    rotor_left=ga.identity_rotor(), rotor_right=ga.identity_rotor())
    defaults.update(kw)
    return Gaussian4D(**defaults)


class TestCovariance:
    def test_identity_rotation_diagonal(self):
        g = identity_gaussian(scale=np.array([1.0, 2.0, 3.0, 4.0]))
        cov = ga.build_covariance(g)
        assert np.allclose(cov, np.diag([1.0, 4.0, 9.0, 16.0]), atol=1e-12)

    def test_rotation_group_property(self, rng):
        for _ in range(50):
            R = ga.batch_rotation(random_unit(rng), random_unit(rng))
            assert np.max(np.abs(R.T @ R - np.eye(4))) < 1e-6
            assert abs(np.linalg.det(R) - 1.0) < 1e-6

    def test_matches_dense_oracle(self, rng):
        for _ in range(50):
            g = make_random_gaussian(rng)
            cov = ga.build_covariance(g)
            expected = covariance_oracle(g)
            assert np.allclose(cov, expected, rtol=1e-9, atol=1e-12)

    def test_symmetric_positive_definite(self, rng):
        for _ in range(1000):
            g = make_random_gaussian(rng)
            cov = ga.build_covariance(g)
            assert np.max(np.abs(cov - cov.T)) < 1e-12
            np.linalg.cholesky(cov + 1e-9 * np.eye(4))

    def test_rejects_non_finite(self):
        g = identity_gaussian()
        g.mu = np.array([np.nan, 0, 0, 0])
        with pytest.raises(InvalidParameterError):
            ga.build_covariance(g)

    def test_scale_clamping(self):
        g = identity_gaussian(scale=np.array([0.0, 1.0, 1.0, 0.0]))
        cov = ga.build_covariance(g)
        assert cov[0, 0] == pytest.approx(ga.MIN_SCALE_SPATIAL ** 2)
        assert cov[3, 3] == pytest.approx(ga.MIN_SCALE_TEMPORAL ** 2)


class TestMarginalOpacity:
    def test_at_center_returns_opacity(self, rng):
        g = make_random_gaussian(rng)
        assert ga.marginal_opacity(g, g.mu[3]) == pytest.approx(g.opacity, abs=0)

    def test_far_away_decays(self):
        g = identity_gaussian(mu=np.array([0, 0, 0, 5.0]))
        assert ga.marginal_opacity(g, 5.0 + 20.0) < 1e-12
        assert ga.marginal_opacity(g, 5.0 - 20.0) < 1e-12

    def test_endpoint_value_from_inverted_radius(self):
        # sigma_t = 1, o = 0.8: at the o_th = 0.05 endpoint the marginal is 0.8 * 0.05
        g = identity_gaussian(mu=np.array([0, 0, 0, 5.0]), opacity=0.8)
        rng_ = ga.influence_range(g, 0.05)
        assert ga.marginal_opacity(g, rng_.end) == pytest.approx(0.04, abs=1e-9)
        assert ga.marginal_opacity(g, rng_.start) == pytest.approx(0.04, abs=1e-9)


class TestInfluenceRange:
    def test_reference_values(self):
        g = identity_gaussian(mu=np.array([0, 0, 0, 5.0]))
        r = ga.influence_range(g, 0.05)
        expected = np.sqrt(-2.0 * np.log(0.05))
        assert r.radius == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(2.44775, abs=1e-5)
        assert r.start == pytest.approx(5.0 - expected, abs=1e-9)
        assert r.end == pytest.approx(5.0 + expected, abs=1e-9)

    def test_radius_scales_with_sqrt_sigma(self):
        g1 = identity_gaussian()
        g2 = identity_gaussian(scale=np.array([1.0, 1.0, 1.0, 2.0]))  # sigma_t x4
        r1 = ga.influence_range(g1, 0.05).radius
        r2 = ga.influence_range(g2, 0.05).radius
        assert r2 == pytest.approx(2.0 * r1, rel=1e-12)

    def test_one_sigma_case(self):
        g = identity_gaussian()
        assert ga.influence_range(g, np.exp(-0.5)).radius == pytest.approx(1.0, rel=1e-12)

    def test_invalid_threshold(self):
        g = identity_gaussian()
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(InvalidParameterError):
                ga.influence_range(g, bad)

    def test_endpoint_factor_many_random(self, rng):
        for _ in range(1000):
            g = make_random_gaussian(rng)
            r = ga.influence_range(g, 0.05)
            for t in (r.start, r.end):
                factor = ga.marginal_opacity(g, t) / g.opacity
                assert factor == pytest.approx(0.05, abs=1e-9)


def dense_pdf(x, mean, cov):
    k = len(mean)
    d = np.asarray(x) - mean
    expo = -0.5 * d @ np.linalg.solve(cov, d)
    return np.exp(expo) / np.sqrt((2 * np.pi) ** k * np.linalg.det(cov))


class TestConditioning:
    def test_block_diagonal_case(self):
        g = identity_gaussian(mu=np.array([1.0, 2.0, 3.0, 4.0]),
                              scale=np.array([1.0, 2.0, 3.0, 4.0]))
        cond = ga.condition_at_time(g, 7.0)
        assert np.allclose(cond.mean3, [1.0, 2.0, 3.0])
        assert np.allclose(cond.cov3, np.diag([1.0, 4.0, 9.0]))

    def test_at_center_mean_unchanged(self, rng):
        for _ in range(20):
            g = make_random_gaussian(rng)
            cond = ga.condition_at_time(g, g.mu[3])
            assert np.allclose(cond.mean3, g.mu[:3], atol=1e-12)
            assert cond.opacity_t == pytest.approx(g.opacity)

    def test_joint_equals_conditional_times_marginal(self, rng):
        for _ in range(1000):
            g = make_random_gaussian(rng)
            cov = ga.build_covariance(g)
            t = g.mu[3] + rng.normal() * np.sqrt(cov[3, 3])
            cond = ga.condition_at_time(g, t)
            joint = dense_pdf(np.concatenate([cond.mean3, [t]]), g.mu, cov)
            conditional = dense_pdf(cond.mean3, cond.mean3, cond.cov3)
            marginal = dense_pdf([t], g.mu[3:], cov[3:, 3:])
            assert joint == pytest.approx(conditional * marginal, rel=1e-9)

    def test_opacity_never_exceeds_source(self, rng):
        for _ in range(100):
            g = make_random_gaussian(rng)
            t = rng.uniform(-5, 15)
            assert ga.condition_at_time(g, t).opacity_t <= g.opacity + 1e-15

    def test_cov3_psd(self, rng):
        for _ in range(200):
            g = make_random_gaussian(rng)
            cond = ga.condition_at_time(g, rng.uniform(0, 10))
            assert np.max(np.abs(cond.cov3 - cond.cov3.T)) < 1e-9
            assert np.linalg.eigvalsh(cond.cov3).min() >= -1e-9
