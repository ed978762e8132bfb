import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def pytest_addoption(parser):
    parser.addoption("--mnist-dir", default=None,
                     help="directory with the real MNIST IDX files; "
                          "enables the real-data portions of the suite")
