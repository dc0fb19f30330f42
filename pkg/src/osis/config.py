"""Run configuration: defaults, YAML files, dotted-path overrides, echoing."""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .losses import LossWeights
from .model import ModelConfig
from .synth import DEFAULT_SHAPES, SynthConfig
from .train import OptimConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "voxel_size": 0.02,
    "unet": {"levels": 2, "channels": [16, 32, 64]},
    "heads": {"d": 32, "k": 64, "c": 8},
    "pe": {"levels": 6},
    "decoder": {"tau": 0.5, "feature_norm": "count"},
    "match": {"alpha": 1.0},
    "loss": {
        "bg_weight": 0.1,
        "aux_mask_weight": 0.5,
        "mask_weight": 1.0,
        "cls_weight": 1.0,
        "offset_weight": 1.0,
        "semantic_weight": 1.0,
        "focal_gamma": 2.0,
        "focal_alpha": 0.25,
    },
    "optim": {"lr": 0.001, "epochs": 1000, "cosine_start_epoch": 300, "grad_accum": 4},
    "infer": {"score_thresh": 0.3, "mask_thresh": 0.5, "matrix_nms": False, "nms_sigma": 0.5},
    "augment": {"enabled": False, "jitter_sigma": 0.005},
    "train": {"checkpoint_every": 0, "log_every": 0},
    "bench": {"repeats": 3},
    "synth": {
        "count": 16,
        "n_instances": [3, 6],
        "points_per_instance": [150, 400],
        "shapes": list(DEFAULT_SHAPES),
        "noise_sigma": 0.005,
        "background_density": 250.0,
        "extent": 3.0,
    },
}


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            _merge(base[key], value, where)
        else:
            base[key] = value


def load_config(path=None, overrides: list[str] | None = None) -> dict:
    """Defaults, optionally merged with a YAML file and ``a.b=value`` overrides.

    Unknown keys are rejected; every key therefore always has a value.
    """
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text())
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, doc)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        dotted, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(node[leaf], dict):
            raise ConfigError(f"{dotted} is a section, not a value")
        node[leaf] = value
    return cfg


def echo_config(cfg: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        voxel_size=float(cfg["voxel_size"]),
        unet_levels=int(cfg["unet"]["levels"]),
        unet_channels=[int(x) for x in cfg["unet"]["channels"]],
        d=int(cfg["heads"]["d"]),
        k=int(cfg["heads"]["k"]),
        c=int(cfg["heads"]["c"]),
        pe_levels=int(cfg["pe"]["levels"]),
        tau=float(cfg["decoder"]["tau"]),
        feature_norm=str(cfg["decoder"]["feature_norm"]),
    )


def optim_config(cfg: dict) -> OptimConfig:
    o = cfg["optim"]
    return OptimConfig(
        lr=float(o["lr"]),
        epochs=int(o["epochs"]),
        cosine_start_epoch=int(o["cosine_start_epoch"]),
        grad_accum=int(o["grad_accum"]),
    )


def loss_weights(cfg: dict) -> LossWeights:
    lo = cfg["loss"]
    return LossWeights(
        mask=float(lo["mask_weight"]),
        cls=float(lo["cls_weight"]),
        offset=float(lo["offset_weight"]),
        semantic=float(lo["semantic_weight"]),
        aux_mask=float(lo["aux_mask_weight"]),
        bg=float(lo["bg_weight"]),
        focal_gamma=float(lo["focal_gamma"]),
        focal_alpha=float(lo["focal_alpha"]),
    )


def synth_config(cfg: dict, seed: int) -> SynthConfig:
    s = cfg["synth"]
    return SynthConfig(
        n_instances=tuple(int(x) for x in s["n_instances"]),
        points_per_instance=tuple(int(x) for x in s["points_per_instance"]),
        shapes=tuple(s["shapes"]),
        noise_sigma=float(s["noise_sigma"]),
        background_density=float(s["background_density"]),
        extent=float(s["extent"]),
        n_classes=int(cfg["heads"]["c"]),
        seed=seed,
    )
