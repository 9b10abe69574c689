import numpy as np
import pytest

from dualsep.numcore import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def weighted_sum(y, seed=99):
    """Scalar probe sum(w * y) with fixed random weights, for grad checks."""
    from dualsep.numcore import mul, sum_

    w = np.random.default_rng(seed).standard_normal(y.shape)
    return sum_(mul(y, w))
