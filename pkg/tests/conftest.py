import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_sim():
    """A cheap simulated dataset (about 60 classes, 3 outcomes, 5 PVs)."""
    from pvmixed.simulate import SimConfig, simulate_population

    c = SimConfig(seed=99, n_pv=5, sd_meas=25.0).with_classes(60)
    return simulate_population(c)
