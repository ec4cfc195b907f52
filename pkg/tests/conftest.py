import numpy as np
import pytest

from crystal.lattice import Cube, LatticeSpec, LatticeState


@pytest.fixture
def harmonic():
    return LatticeSpec.from_coeffs(1, 1, U=[0, 1], V=[0, 1])


@pytest.fixture
def quartic():
    return LatticeSpec.from_coeffs(1, 1, U=[0, 1, 1], V=[0, 1])


def random_state(spec, radius, seed=0, scale=1.0, center=None):
    rng = np.random.default_rng(seed)
    center = center or (0,) * spec.d
    cube = Cube(center, radius)
    shape = cube.shape + (spec.nu,)
    return LatticeState(spec, cube, scale * rng.standard_normal(shape), scale * rng.standard_normal(shape))
