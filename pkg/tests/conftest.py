"""Shared fixtures: a tiny model configuration and hand-built scenes."""

import os

import numpy as np
import pytest

from app.core.config import RunConfig
from app.core.rng import Rng
from app.services.data.synthetic import PanopticLabel
from app.services.segmenter.model import ModelDims, ModelParams


def pytest_collection_modifyitems(config, items):
    if os.getenv("P2F_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set P2F_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


TINY = dict(
    image_size=8,
    embed_dim=4,
    num_queries=3,
    query_dim=6,
    hidden_dim=8,
    num_classes=4,
    batch_size=1,
    points_per_mask=64,
    workers=1,
)


@pytest.fixture
def tiny_config() -> RunConfig:
    return RunConfig(**TINY)


@pytest.fixture
def tiny_params(tiny_config) -> ModelParams:
    return ModelParams.initialize(ModelDims.from_config(tiny_config), Rng(7, "init"))


def make_scene(size: int = 8, seed: int = 3):
    """Sky over ground with one square instance, plus a noisy image.

    Returns:
        (image [3 x size*size], PanopticLabel)
    """
    rows = np.repeat(np.arange(size), size)
    cols = np.tile(np.arange(size), size)
    class_map = np.where(rows < size // 2, 0, 1).astype(np.int64)
    instance_map = np.zeros(size * size, dtype=np.int64)
    square = (rows >= 1) & (rows < 4) & (cols >= 2) & (cols < 5)
    class_map[square] = 3
    instance_map[square] = 1

    colors = {0: (0.45, 0.65, 0.9), 1: (0.4, 0.32, 0.2), 3: (0.2, 0.7, 0.3)}
    image = np.empty((3, size * size))
    for class_id, color in colors.items():
        image[:, class_map == class_id] = np.array(color)[:, None]
    image += 0.02 * Rng(seed, "noise").normal(3 * size * size).reshape(3, -1)
    image = np.clip(image, 0.0, 1.0)
    return image, PanopticLabel(class_map, instance_map, size, size)


@pytest.fixture
def scene():
    return make_scene()
