import numpy as np
import pytest

from evppi.oracles import savi_like_spec, simulate_gaussian_model


@pytest.fixture(scope="session")
def savi_spec():
    return savi_like_spec(0)


@pytest.fixture(scope="session")
def savi_data(savi_spec):
    return simulate_gaussian_model(savi_spec, 1000, 10000)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
