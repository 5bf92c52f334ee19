import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import diffdenoise as dd

settings.register_profile(
    "default",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def phantom_bank():
    """Shared clean 64x64 phantoms for metric and noise statistics."""
    return dd.generate_phantoms(60, 64, seed=1234)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
