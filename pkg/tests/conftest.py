import numpy as np
import pytest

from helpers import taxi_fixture


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def taxi():
    return taxi_fixture("classic", 0.0)
