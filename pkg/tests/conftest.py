import numpy as np
import pytest
from hypothesis import settings

from koopman_uq.dataset import generate_dataset, split
from koopman_uq.dynamics import SimConfig

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_split():
    """Forty short trajectories, enough for fast model fits."""
    ds = generate_dataset(40, 50, SimConfig(dt=0.01, steps=50), seed=3)
    return split(ds, (0.7, 0.2, 0.1), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
