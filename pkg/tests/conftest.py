import numpy as np
import pytest

from embdistill.data import generate_synthetic, preset


@pytest.fixture(scope="session")
def separable():
    """(train, val) of the separable preset."""
    return generate_synthetic(preset("separable"))


@pytest.fixture(scope="session")
def small_sets():
    """A quick 32-dim variant for training tests."""
    return generate_synthetic(preset("separable", num_cliques=40, num_val_cliques=20,
                                     teacher_dim=32, num_noise_items=20))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
