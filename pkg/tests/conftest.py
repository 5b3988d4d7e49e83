import numpy as np
import pytest

import stovar as sv


@pytest.fixture(scope="session")
def grid200():
    return sv.TimeGrid(1.0, 2.0, 200)


@pytest.fixture(scope="session")
def bm_model():
    # standard Brownian motion observed on [1, 2], spawned at the origin at
    # absolute time 0, so the time-t law is N(0, t)
    return sv.affine_model(1, [[0.0]], [0.0], [[1.0]],
                           sv.gaussian_start([0.0], [[1.0]]), "bm")


@pytest.fixture(scope="session")
def bm_small(bm_model, grid200):
    return sv.simulate(bm_model, grid200, 2000, seed=123)


@pytest.fixture(scope="session")
def bm_density():
    return sv.brownian_density(1, 1.0)


@pytest.fixture(scope="session")
def ou_model():
    return sv.affine_model(1, [[-1.0]], [0.0], [[1.0]],
                           sv.gaussian_start([0.0], [[0.5]]), "ou-stationary")


@pytest.fixture(scope="session")
def ou_small(ou_model, grid200):
    return sv.simulate(ou_model, grid200, 2000, seed=124)


@pytest.fixture(scope="session")
def ou_density():
    return sv.ou_stationary_density(1, 1.0, 1.0)


@pytest.fixture(scope="session")
def harmonic_spec():
    return sv.LagrangianSpec(sv.QuadraticForm([[1.0]]), sv.harmonic_potential(1.0), 1)


@pytest.fixture(scope="session")
def free_spec():
    return sv.LagrangianSpec(sv.QuadraticForm([[1.0]]), sv.free_potential(), 1)


def state_slope(values, states):
    """Least-squares slope of (possibly complex) values against a scalar state."""
    x = states[:, 0]
    y = values[:, 0]
    xc = x - x.mean()
    return np.sum(xc * (y - y.mean())) / np.sum(xc * xc)
