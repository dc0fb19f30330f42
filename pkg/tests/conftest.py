import numpy as np
import pytest

from osis.geometry import PointCloud
from osis.model import Model, ModelConfig


def tiny_scene(seed=0, n=60, n_classes=4):
    """Small labeled cloud: two instances plus floor-like background."""
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 0.4, size=(n, 3))
    colors = rng.uniform(0, 1, size=(n, 3))
    sem = np.full(n, 0)
    inst = np.full(n, -1)
    a = n // 3
    b = 2 * n // 3
    pos[:a] = rng.normal((0.1, 0.1, 0.1), 0.03, size=(a, 3))
    pos[a:b] = rng.normal((0.3, 0.3, 0.15), 0.03, size=(b - a, 3))
    sem[:a] = 2
    inst[:a] = 0
    sem[a:b] = 3
    inst[a:b] = 1
    return PointCloud(pos, colors, sem, inst)


def tiny_model(seed=0, **kw):
    cfg = ModelConfig(
        voxel_size=kw.pop("voxel_size", 0.05),
        unet_channels=kw.pop("unet_channels", [8, 16, 32]),
        d=kw.pop("d", 16),
        k=kw.pop("k", 8),
        c=kw.pop("c", 4),
        **kw,
    )
    return Model(cfg, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
