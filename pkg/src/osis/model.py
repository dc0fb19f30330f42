"""Model assembly: backbone + instance decoder behind one parameter registry."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, BackboneOutput, PreparedScene, backbone_apply, prepare_scene
from .decoder import InstanceDecoder, InstanceSet
from .geometry import GroundTruthInstance, PointCloud, instances_from_cloud, offset_targets
from .tensor import Parameter


@dataclass
class ModelConfig:
    voxel_size: float = 0.02
    unet_levels: int = 2
    unet_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    d: int = 32
    k: int = 64
    c: int = 8
    pe_levels: int = 6
    tau: float = 0.5
    feature_norm: str = "count"


class Model:
    """All trainable state plus the forward composition for one scene."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(
            rng,
            levels=config.unet_levels,
            channels=list(config.unet_channels),
            d=config.d,
            k=config.k,
            c=config.c,
        )
        self.decoder = InstanceDecoder(
            rng,
            d=config.d,
            c=config.c,
            pe_levels=config.pe_levels,
            tau=config.tau,
            feature_norm=config.feature_norm,
        )
        names = [p.name for p in self.parameters()]
        assert len(names) == len(set(names)), "duplicate parameter names"

    def parameters(self) -> list[Parameter]:
        return self.backbone.parameters() + self.decoder.parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.zero_grad()

    def forward(self, prep: PreparedScene) -> tuple[BackboneOutput, InstanceSet]:
        out = backbone_apply(prep, self.backbone)
        inst = self.decoder.decode(out, prep.cloud.positions)
        return out, inst

    def forward_cloud(self, cloud: PointCloud) -> tuple[BackboneOutput, InstanceSet]:
        return self.forward(prepare_scene(cloud, self.config.voxel_size))


@dataclass
class TrainScene:
    """A prepared scene plus cached supervision targets."""

    prep: PreparedScene
    gts: list[GroundTruthInstance]
    fg: np.ndarray
    fg_targets: np.ndarray


def prepare_train_scene(cloud: PointCloud, voxel_size: float) -> TrainScene:
    prep = prepare_scene(cloud, voxel_size)
    gts = instances_from_cloud(cloud) if cloud.has_ground_truth else []
    fg, fg_targets = offset_targets(cloud) if cloud.has_ground_truth else (np.zeros(0, np.int64), np.zeros((0, 3)))
    return TrainScene(prep=prep, gts=gts, fg=fg, fg_targets=fg_targets)
