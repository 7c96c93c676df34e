import numpy as np
import pytest

from repfield3d.tensor import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def randn(seed, *shape):
    return make_rng(seed).standard_normal(shape)


np.set_printoptions(precision=6, suppress=True)
