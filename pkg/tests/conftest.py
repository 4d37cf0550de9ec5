import numpy as np
import pytest

from soupkit.data import make_shapes


@pytest.fixture(scope="session")
def tiny_dataset():
    """A small 8x8 ten-class sample shared by fast unit tests."""
    return make_shapes(120, seed=11, size=8, noise=0.08, name="tiny")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
