import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run long training-scale tests even without cached artifacts")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running reduced-scale training runs")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
