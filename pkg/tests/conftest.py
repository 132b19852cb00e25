import numpy as np
import pytest

from matseg.data import PhantomConfig, generate_phantoms


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_phantoms():
    """Four 32x32 phantoms, enough for depth <= 2 smoke runs."""
    return generate_phantoms(PhantomConfig(size=(32, 32), seed=7), 4)
