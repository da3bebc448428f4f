import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def sym_noise(rng, d):
    """GOE(d): symmetric Gaussian with semicircle(1) spectrum."""
    Z = rng.standard_normal((d, d))
    return (Z + Z.T) / np.sqrt(2 * d)
