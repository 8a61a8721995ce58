import math

import numpy as np
import pytest

from mbdecay import floerlab as fl
from mbdecay import morsebott as mb


@pytest.fixture(scope="session")
def sphere_flow():
    sc = mb.sphere_height()
    traj = mb.integrate_gradient_flow(sc.M, sc.f, mb.meridian_point(1.0), 40.0)
    return sc, mb.with_limit(traj, sc.Z)


@pytest.fixture(scope="session")
def circle_flow():
    sc = mb.circle_morse_bott()
    x0 = np.array([1.03, 0.0, 0.04])
    traj = mb.integrate_gradient_flow(sc.M, sc.f, x0, 15.0)
    return sc, mb.with_limit(traj, sc.Z)


@pytest.fixture(scope="session")
def heteroclinic():
    return mb.sphere_heteroclinic()


@pytest.fixture(scope="session")
def radial64():
    return fl.radial_setup(64)


@pytest.fixture(scope="session")
def radial128():
    return fl.radial_setup(128)


@pytest.fixture(scope="session")
def newton_cylinder(radial64):
    _, chart, _, split = radial64
    seed = fl.floer_seed(split, 1e-3)
    return seed, fl.nonlinear_floer_solve(chart, split, seed, 1.0, 200)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(20240611))


def meridian_theta(theta0, s):
    """Closed-form polar angle of the height-function flow on the unit sphere."""
    return 2.0 * np.arctan(math.tan(theta0 / 2.0) * np.exp(-np.asarray(s)))
