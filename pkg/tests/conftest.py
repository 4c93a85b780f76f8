import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def truth():
    from unspanned.simulate import default_truth

    return default_truth()


@pytest.fixture(scope="session")
def sim(truth):
    from unspanned.simulate import simulate_panel

    return simulate_panel(truth, 120, seed=11)
