import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from navtraj.synth import GridSpec, grid_network

settings.register_profile("navtraj", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("navtraj")


@pytest.fixture(scope="session")
def grid4():
    return grid_network(GridSpec(rows=4, cols=4))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
