"""
Shared test fixtures: a tiny ViT, tiny synthetic datasets, a trained tiny model and probe
"""

import os
import sys

import numpy as np
import pytest

# Add the repository root to the Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import Config
from src.core.models import ViTConfig
from src.services.dataset_service import train_test
from src.services.probe_service import fit_probe
from src.services.zoo_service import train_model

TINY_SIZE = 16
TINY_CLASSES = 3

# Small enough to run `all` in seconds; the admission gate is disabled.
TINY_RUN_CONFIG = """
# tiny end-to-end pipeline
num_classes = 3
per_class_train = 6
per_class_test = 3
image_size = 16
pool = default@1,patch16@2
model_epochs = 1
model_batch = 6
probe_epochs = 20
admission_threshold = 0
n_images = 6
batch = 3
epochs = 1
psap_steps = 2
psap_samples = 2
sweep_thetas = 1,10
sweep_epsilons = 5,20
ablate_sizes = 3,6
pool_sizes = 1,2
switch_period = 1
histogram_bins = 5
heatmap_images = 3
pca_images = 6
"""


def pytest_collection_modifyitems(config, items):
    if Config.UTAP_RUN_SLOW:
        return
    skip_slow = pytest.mark.skip(reason="acceptance run; set UTAP_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def tiny_config():
    return ViTConfig(image_size=TINY_SIZE, patch_size=8, embed_dim=16, num_heads=2, depth=1,
                     mlp_ratio=2, num_classes=TINY_CLASSES)


@pytest.fixture(scope="session")
def tiny_data():
    """(train, test) with 12 / 6 images per class."""
    return train_test(TINY_CLASSES, 12, 6, TINY_SIZE, seed=3)


@pytest.fixture(scope="session")
def tiny_model(tiny_config, tiny_data):
    train, _ = tiny_data
    return train_model(train, tiny_config, epochs=3, lr=3e-3, seed=0, batch_size=12, model_id="tiny-s0")


@pytest.fixture(scope="session")
def tiny_probe(tiny_model, tiny_data):
    train, _ = tiny_data
    return fit_probe(tiny_model, train, epochs=100, lr=1e-2, seed=0)


@pytest.fixture(scope="session")
def second_model(tiny_config, tiny_data):
    train, _ = tiny_data
    return train_model(train, tiny_config, epochs=1, lr=3e-3, seed=1, batch_size=12, model_id="tiny-s1")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
