import numpy as np
import pytest

from slimkit.zoo import load_fixture


@pytest.fixture(scope="session")
def yolo_fixture():
    return load_fixture()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
