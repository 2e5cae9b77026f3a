import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from swinunetr import tiny_config

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return tiny_config(n_classes=3)
