import numpy as np
import pytest

from nfsense import Grid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid8():
    return Grid((8, 8, 1), (0.08, 0.08, 0.002))


@pytest.fixture
def grid32():
    return Grid((32, 32, 1), (0.22, 0.22, 0.002))
