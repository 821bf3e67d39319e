import numpy as np
import pytest

from neuroprog.tensor import set_default_dtype


@pytest.fixture
def f64():
    prev = set_default_dtype("float64")
    yield np.float64
    set_default_dtype(prev)


@pytest.fixture
def f32():
    prev = set_default_dtype("float32")
    yield np.float32
    set_default_dtype(prev)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains networks; minutes rather than seconds")
