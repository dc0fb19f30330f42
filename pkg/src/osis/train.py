"""Adam training with cosine annealing and gradient accumulation over scenes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .losses import LossBreakdown, LossWeights, total_loss
from .matching import hungarian_assign, similarity_matrix
from .model import Model, TrainScene
from .tensor import Parameter


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimConfig:
    lr: float = 0.001
    epochs: int = 1000
    cosine_start_epoch: int = 300
    grad_accum: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def cosine_lr(base_lr: float, epoch: int, total_epochs: int, start_epoch: int) -> float:
    """Constant until start_epoch, then half-cosine decay reaching 0 at the end."""
    if epoch < start_epoch or total_epochs <= start_epoch:
        return base_lr
    frac = (epoch - start_epoch) / (total_epochs - start_epoch)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(frac, 1.0)))


class Adam:
    def __init__(self, params: list[Parameter], cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data[...] -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def scene_loss(model: Model, scene: TrainScene, weights: LossWeights, match_alpha: float):
    """Forward one scene, match candidates to ground truth, compose the loss."""
    out, inst = model.forward(scene.prep)
    if scene.gts:
        class_probs = _softmax_np(inst.class_logits.data)
        q = similarity_matrix(class_probs, inst.mask_probs.data, scene.gts, match_alpha)
        assignment = hungarian_assign(q)
    else:
        assignment = hungarian_assign(np.zeros((model.config.k, 0)))
    return total_loss(
        inst.mask_logits,
        out.mask_logits,
        inst.class_logits,
        out.offsets,
        out.semantic_logits,
        assignment,
        scene.gts,
        scene.prep.cloud,
        weights,
        fg=scene.fg,
        fg_targets=scene.fg_targets,
    )


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def train_step(
    scenes: list[TrainScene],
    model: Model,
    optimizer: Adam,
    lr: float,
    weights: LossWeights,
    match_alpha: float,
) -> LossBreakdown:
    """Accumulate gradients over the scene list, apply one Adam update."""
    if not scenes:
        raise ValueError("train_step needs at least one scene")
    model.zero_grad()
    acc = np.zeros(5)
    inv = 1.0 / len(scenes)
    for scene in scenes:
        try:
            total, bd = scene_loss(model, scene, weights, match_alpha)
        except FloatingPointError as err:
            raise TrainingDiverged(f"aborting step: {err}") from err
        (total * inv).backward()
        acc += [bd.mask_loss, bd.cls_loss, bd.offset_loss, bd.semantic_loss, bd.total]
    optimizer.step(lr)
    acc *= inv
    return LossBreakdown(*acc)


@dataclass
class FitResult:
    steps: int = 0
    epochs: int = 0
    history: list[dict] = field(default_factory=list)


def fit(
    model: Model,
    scenes: list[TrainScene],
    optim_cfg: OptimConfig,
    weights: LossWeights,
    match_alpha: float,
    max_steps: int | None = None,
    log_every: int = 0,
    on_step=None,
) -> FitResult:
    """Epoch loop: scenes consumed sequentially in grad_accum-sized chunks."""
    opt = Adam(model.parameters(), optim_cfg)
    result = FitResult()
    accum = max(1, optim_cfg.grad_accum)
    for epoch in range(optim_cfg.epochs):
        lr = cosine_lr(optim_cfg.lr, epoch, optim_cfg.epochs, optim_cfg.cosine_start_epoch)
        for lo in range(0, len(scenes), accum):
            chunk = scenes[lo : lo + accum]
            bd = train_step(chunk, model, opt, lr, weights, match_alpha)
            result.steps += 1
            record = {"step": result.steps, "epoch": epoch, "lr": lr, **bd.to_dict()}
            if log_every and (result.steps % log_every == 0):
                print(
                    f"step {result.steps} epoch {epoch} lr {lr:.5f} "
                    f"total {bd.total:.4f} mask {bd.mask_loss:.4f} cls {bd.cls_loss:.4f}"
                )
            if on_step is not None:
                on_step(record)
            result.history.append(record)
            if max_steps is not None and result.steps >= max_steps:
                result.epochs = epoch + 1
                return result
        result.epochs = epoch + 1
    return result
