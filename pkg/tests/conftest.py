"""
Shared test fixtures for the DOA estimation tests.
Provides the standard arrays, seeded generators and small hand-built networks.
"""
import sys
import os

import numpy as np
import pytest

# Ensure the repository root is on the path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from array_model import make_ula
from neural_net import ModelParams, init_model
from sp2_training import TrainConfig, make_target_spec


# ---------------------------------------------------------------------------
# Slow-test switch
# ---------------------------------------------------------------------------

def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run Monte-Carlo and training tests marked slow")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte-Carlo or training run")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# ---------------------------------------------------------------------------
# Network helpers
# ---------------------------------------------------------------------------

def zero_model(layer_dims, skip_pairs=()):
    """All-zero weights and biases; every output is exactly 0.5."""
    return ModelParams(
        layer_dims=list(layer_dims),
        weights=[np.zeros((layer_dims[i], layer_dims[i + 1])) for i in range(len(layer_dims) - 1)],
        biases=[np.zeros(layer_dims[i + 1]) for i in range(len(layer_dims) - 1)],
        skip_pairs=list(skip_pairs),
    )


def random_model(layer_dims, seed, skip_pairs=(), scale=0.5):
    """Dense random weights and biases, large enough that ReLUs are mixed."""
    rng = np.random.default_rng(seed)
    return ModelParams(
        layer_dims=list(layer_dims),
        weights=[rng.normal(0.0, scale, size=(layer_dims[i], layer_dims[i + 1]))
                 for i in range(len(layer_dims) - 1)],
        biases=[rng.normal(0.0, scale, size=layer_dims[i + 1]) for i in range(len(layer_dims) - 1)],
        skip_pairs=list(skip_pairs),
    )


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------

@pytest.fixture
def ula16():
    return make_ula(16)


@pytest.fixture
def ula4():
    return make_ula(4)


@pytest.fixture
def target_spec():
    return make_target_spec(64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def micro_model():
    """65 -> 8 -> 8 -> 1 with one residual link between the 8-wide layers."""
    return init_model([65, 8, 8, 1], np.random.default_rng(3), skip_pairs=[(1, 2)])


@pytest.fixture
def toy_train_config():
    """Cheap settings for loop-level tests."""
    return TrainConfig(
        scenarios_per_iteration=8,
        k_hypotheses=10,
        validation_size=20,
        eval_interval=5,
        patience=3,
        max_iterations=20,
        seed=11,
        validation_seed=5,
    )
