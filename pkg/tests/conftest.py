import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def unit_rows(n, d, seed=0):
    """Random points on the unit sphere, float32."""
    g = np.random.Generator(np.random.PCG64(seed))
    x = g.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x.astype(np.float32)
