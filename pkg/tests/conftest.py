import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_design(rng, n, k, intercept=True):
    """Well-conditioned random design with an optional leading intercept."""
    X = rng.normal(size=(n, k))
    if intercept:
        X[:, 0] = 1.0
    return X
