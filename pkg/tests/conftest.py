"""Shared pytest fixtures for LQELab tests."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
PROJECT_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from src.scenes.synthgen import SceneConfig  # noqa: E402
from src.scenes.sources import SyntheticSceneSource  # noqa: E402
from src.training.head import HeadVariant, VariantKind  # noqa: E402
from src.training.trainer import TrainConfig, train  # noqa: E402
from src.utils.config import load_config  # noqa: E402

FIXTURES = PROJECT_ROOT / "tests" / "fixtures"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the multi-minute acceptance experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute acceptance experiment (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_scene_config():
    """32x32 canvas, 64 locations, two classes."""
    return SceneConfig(image_size=(32, 32), grid_stride=4, num_objects=(1, 2), num_classes=2,
                       feature_dim=16, min_size=8.0, max_size=16.0, seed=7)


@pytest.fixture
def small_source(small_scene_config):
    return SyntheticSceneSource(small_scene_config)


@pytest.fixture
def quick_train_config():
    return TrainConfig(steps=20, batch_scenes=2, learning_rate=0.05, grid_n=8, log_every=0, seed=3)


@pytest.fixture
def small_variant():
    return HeadVariant(kind=VariantKind.GFLV2_DECOMPOSED, k=2, p=8, backbone_width=16)


@pytest.fixture
def trained_small(quick_train_config, small_source, small_variant):
    """(checkpoint, log) of a 20-step decomposed run on small scenes."""
    return train(quick_train_config, small_source, small_variant)


@pytest.fixture
def scene_fixture_path():
    return FIXTURES / "scene_small.json"


TINY_OVERRIDES = [
    "scene.image_size=[32, 32]", "scene.num_objects=[1, 2]", "scene.num_classes=2",
    "scene.feature_dim=16", "scene.min_size=8.0", "scene.max_size=16.0",
    "grid.n=8", "head.k=2", "head.p=8", "head.backbone_width=16", "head.composed_dim=8",
    "train.steps=8", "train.batch_scenes=2", "train.log_every=0",
    "analysis.eval_scenes=4", "analysis.seeds=[0, 1]",
]


@pytest.fixture
def tiny_overrides():
    """``--set`` strings for a config that trains in well under a second."""
    return list(TINY_OVERRIDES)


@pytest.fixture
def tiny_cfg(tiny_overrides):
    return load_config(overrides=tiny_overrides)
