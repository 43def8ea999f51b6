import dataclasses

import numpy as np
import pytest

from src.core_model import PhysicsConfig
from src.photophysics import frozen_charge


@pytest.fixture
def config():
    return PhysicsConfig()


@pytest.fixture
def frozen_config(config):
    return frozen_charge(config)


@pytest.fixture
def no_crosstalk_config(config):
    emission = dataclasses.replace(
        config.emission, crosstalk_minus_in_zero=0.0, crosstalk_zero_in_minus=0.0
    )
    return dataclasses.replace(config, emission=emission)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
