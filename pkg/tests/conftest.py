import math

import numpy as np
import pytest

from neumannlb.discretize import assemble_neumann, build_grid
from neumannlb.geometry import get_manifold


@pytest.fixture(scope="session")
def interval_op():
    """Flat [0, pi] with 128 cells."""
    return assemble_neumann(build_grid(get_manifold("flat_interval"), 128))


@pytest.fixture(scope="session")
def x4_grid():
    return build_grid(get_manifold("x4_example"), 400, truncation=100.0,
                      grading="uniform-in-arclength")


@pytest.fixture(scope="session")
def x4_op(x4_grid):
    return assemble_neumann(x4_grid)


@pytest.fixture(scope="session")
def cylinder_op():
    return assemble_neumann(build_grid(get_manifold("flared_cylinder"), 24, n_theta=16))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def observed_order(errors, ratio=2.0):
    e = np.asarray(errors, dtype=float)
    return np.log(e[:-1] / e[1:]) / math.log(ratio)
