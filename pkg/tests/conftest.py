# tests/conftest.py

import sys

import numpy as np
import pytest
from loguru import logger

from src.network import GateConfig, ModelConfig, init_params
from src.synthetic_data import DatasetSpec, generate_synthetic
from tests.helpers import with_random_biases


@pytest.fixture(autouse=True)
def quiet_logger():
    logger.remove()
    logger.add(sys.stderr, level="WARNING")
    yield
    logger.remove()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def highway_config():
    return ModelConfig(input_dim=5, hidden_dim=6, num_layers=3, output_dim=4, architecture="highway")


@pytest.fixture
def highway_params(highway_config, rng):
    return with_random_biases(init_params(highway_config, seed=3), rng)


@pytest.fixture
def constrained_config():
    return ModelConfig(5, 6, 3, 4, "highway", GateConfig(transform=True, carry=False, constrained=True))


@pytest.fixture(scope="session")
def toy_splits():
    data = generate_synthetic(
        DatasetSpec(num_classes=4, feature_dim=8, frames_per_class=60, test_frames_per_class=30,
                    adapt_frames_per_class=30, shift=(1.5,) + (0.0,) * 7, seed=11)
    )
    return {"train": data.speaker(0), "adapt": data.speaker(1), "test": data.speaker(2), "all": data}
