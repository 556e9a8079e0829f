import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fkmeasure import divergence_form_generator, fractional_generator, interval_grid

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def heat():
    g = interval_grid(0.0, 1.0, 9, 1.0, 12)
    return divergence_form_generator(g, 0.1)


@pytest.fixture
def frac():
    g = interval_grid(0.0, 1.0, 9, 0.5, 10)
    return fractional_generator(g, 1.2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
