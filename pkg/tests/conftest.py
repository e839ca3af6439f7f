import numpy as np
import pytest

from tgh.gaussians import Gaussian4D


def random_unit(rng, n=4):
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def make_random_gaussian(rng, t_center_range=(0.0, 10.0), scale_range=(0.05, 2.0)):
    lo, hi = scale_range
    mu = np.concatenate([rng.uniform(-3, 3, size=3), [rng.uniform(*t_center_range)]])
    return Gaussian4D(
        mu=mu,
        scale=rng.uniform(lo, hi, size=4),
        rotor_left=random_unit(rng),
        rotor_right=random_unit(rng),
        opacity=rng.uniform(0.05, 1.0),
        base_color=rng.uniform(0.0, 1.0, size=3),
        sh_residual=rng.normal(scale=0.1, size=45),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240809)
