"""
Pytest configuration and fixtures for DCMNet tests.
"""

import json
import sys

import pytest

from dcmnet.model import ModelConfig
from dcmnet.preprocessing import SyntheticSpec, generate_synthetic, prepare_dataset, save_dataset
from dcmnet.routing import RoutingConfig
from dcmnet.training import TrainConfig

# Fix Windows console encoding
if sys.platform == "win32":
    sys.stdout.reconfigure(encoding="utf-8")

TINY_SPEC = SyntheticSpec(
    num_classes=3,
    height=16,
    width=16,
    bands=8,
    block_size=4,
    train_per_class=6,
    seed=3,
)

TINY_MODEL = {
    "components": 4,
    "patch_size": 7,
    "hsi_widths": [2, 2, 2],
    "lidar_widths": [2, 2, 2],
    "routing": {"channels": 4, "size": 3, "gate_hidden": 8},
}


@pytest.fixture(scope="session")
def tiny_cube():
    """16x16 scene, 8 bands, 3 classes, 6 train pixels per class."""
    return generate_synthetic(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_config():
    """Smallest network that still has three encoder levels and a 3x3 routing grid."""
    return ModelConfig(
        bands=8,
        components=4,
        patch_size=7,
        num_classes=3,
        hsi_widths=(2, 2, 2),
        lidar_widths=(2, 2, 2),
        routing=RoutingConfig(channels=4, size=3, gate_hidden=8),
    )


@pytest.fixture(scope="session")
def tiny_prepared(tiny_cube, tiny_config):
    return prepare_dataset(tiny_cube, tiny_config.components, tiny_config.patch_size)


@pytest.fixture
def quick_train():
    return TrainConfig(epochs=2, batch_size=8, seed=0)


@pytest.fixture(scope="session")
def tiny_dataset_path(tiny_cube, tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.dynf"
    save_dataset(tiny_cube, path)
    return path


@pytest.fixture(scope="session")
def tiny_config_file(tmp_path_factory):
    """Run config that shrinks the desk preset to the tiny network and one epoch."""
    path = tmp_path_factory.mktemp("config") / "tiny.json"
    path.write_text(
        json.dumps(
            {
                "preset": "desk",
                "model": TINY_MODEL,
                "train": {"epochs": 1, "batch_size": 16},
            }
        ),
        encoding="utf-8",
    )
    return path


@pytest.fixture(scope="session")
def desk_cube():
    """Default synthetic scene: 6 classes, 64x64, 20 bands, 100 train pixels per class, seed 7."""
    return generate_synthetic(SyntheticSpec())
