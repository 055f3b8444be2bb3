import numpy as np
import pytest

from uavrl import dynamics as dyn


@pytest.fixture(scope="session")
def nominal():
    return dyn.x8_nominal()


@pytest.fixture(scope="session")
def trim18(nominal):
    return dyn.trim(nominal, 18.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
