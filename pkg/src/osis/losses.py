"""Training losses: offset regression, semantics, masks (dice + focal),
instance classification, and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import GroundTruthInstance, PointCloud, offset_targets
from .matching import Assignment
from .tensor import Tensor

LOG_CLAMP = 1e-12


@dataclass
class LossBreakdown:
    """Per-term values of one (possibly averaged) training objective."""

    mask_loss: float
    cls_loss: float
    offset_loss: float
    semantic_loss: float
    total: float

    def to_dict(self) -> dict[str, float]:
        return {
            "mask_loss": self.mask_loss,
            "cls_loss": self.cls_loss,
            "offset_loss": self.offset_loss,
            "semantic_loss": self.semantic_loss,
            "total": self.total,
        }


def offset_l1(offsets: Tensor, fg: np.ndarray, targets: np.ndarray) -> Tensor:
    """Mean L1 distance between predicted and target offsets on given rows."""
    if fg.size == 0:
        return Tensor(0.0)
    diff = T.gather_rows(offsets, fg) - targets
    return T.tsum(T.tabs(diff)) * (1.0 / fg.size)


def offset_loss(offsets: Tensor, cloud: PointCloud) -> Tensor:
    """Mean over foreground points of |o - (centroid - p)|_1; 0 without foreground."""
    fg, targets = offset_targets(cloud)
    return offset_l1(offsets, fg, targets)


def semantic_loss(semantic_logits: Tensor, cloud: PointCloud) -> Tensor:
    """Mean cross entropy over points with a label; -1 labels are ignored."""
    labels = cloud.gt_semantic
    rows = np.flatnonzero(labels >= 0)
    if rows.size == 0:
        return Tensor(0.0)
    lp = T.log_softmax(semantic_logits, axis=1)
    picked = T.gather_items(lp, rows, labels[rows])
    return T.tsum(picked) * (-1.0 / rows.size)


def focal_loss(logits: Tensor, targets, gamma: float = 2.0, alpha_f: float = 0.25) -> Tensor:
    """Binary focal loss, mean over elements; log argument clamped at 1e-12."""
    t = np.asarray(targets, dtype=np.float64).ravel()
    if logits.data.ndim != 1 or logits.shape[0] != t.size:
        raise ValueError(f"focal: shape mismatch {logits.shape} vs {t.shape}")
    p = T.sigmoid(logits)
    p_t = p * t + (1.0 - p) * (1.0 - t)
    alpha_t = alpha_f * t + (1.0 - alpha_f) * (1.0 - t)
    mod = T.power_const(1.0 - p_t, gamma)
    return tneg_mean(mod * T.log(T.clamp_min(p_t, LOG_CLAMP)) * alpha_t)


def tneg_mean(x: Tensor) -> Tensor:
    return T.tmean(x) * -1.0


def soft_dice(mask_probs: Tensor, gt_mask: np.ndarray) -> Tensor:
    """Differentiable dice of a soft mask against a binary mask."""
    g = np.asarray(gt_mask, dtype=np.float64).ravel()
    num = T.tsum(mask_probs * g) * 2.0
    den = T.tsum(mask_probs * mask_probs) + float(g @ g)
    return num / den


def mask_loss(
    mask_logits: Tensor,
    assignment: Assignment,
    gts: list[GroundTruthInstance],
    gamma: float = 2.0,
    alpha_f: float = 0.25,
) -> Tensor:
    """Mean over matched pairs of (1 - dice) + focal; 0 without pairs."""
    if not assignment.pairs:
        return Tensor(0.0)
    terms = None
    for cand, gt_idx in assignment.pairs:
        col = T.tsum(T.gather_cols(mask_logits, [cand]), axis=1)  # (N,)
        gt = gts[gt_idx].mask.astype(np.float64)
        pair = (1.0 - soft_dice(T.sigmoid(col), gt)) + focal_loss(col, gt, gamma, alpha_f)
        terms = pair if terms is None else terms + pair
    return terms * (1.0 / len(assignment.pairs))


def classification_loss(
    class_logits: Tensor,
    assignment: Assignment,
    gts: list[GroundTruthInstance],
    bg_weight: float,
) -> Tensor:
    """Cross entropy per candidate: matched -> gt class, unmatched -> background
    (scaled by bg_weight); mean over all k candidates."""
    k, width = class_logits.shape
    background = width - 1
    targets = np.full(k, background, dtype=np.int64)
    weights = np.full(k, bg_weight, dtype=np.float64)
    for cand, gt_idx in assignment.pairs:
        targets[cand] = gts[gt_idx].semantic_class
        weights[cand] = 1.0
    lp = T.log_softmax(class_logits, axis=1)
    picked = T.gather_items(lp, np.arange(k), targets)
    return T.tsum(picked * weights) * (-1.0 / k)


@dataclass
class LossWeights:
    mask: float = 1.0
    cls: float = 1.0
    offset: float = 1.0
    semantic: float = 1.0
    aux_mask: float = 0.5
    bg: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25


def total_loss(
    final_mask_logits: Tensor,
    initial_mask_logits: Tensor,
    class_logits: Tensor,
    offsets: Tensor,
    semantic_logits: Tensor,
    assignment: Assignment,
    gts: list[GroundTruthInstance],
    cloud: PointCloud,
    weights: LossWeights,
    fg: np.ndarray | None = None,
    fg_targets: np.ndarray | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum mask + cls + (offset + semantic); the returned breakdown
    fields sum to total in exactly that association."""
    gam, al = weights.focal_gamma, weights.focal_alpha
    mask_term = mask_loss(final_mask_logits, assignment, gts, gam, al) * weights.mask
    if weights.aux_mask != 0.0:
        mask_term = mask_term + mask_loss(initial_mask_logits, assignment, gts, gam, al) * weights.aux_mask
    cls_term = classification_loss(class_logits, assignment, gts, weights.bg) * weights.cls
    if fg is None:
        fg, fg_targets = offset_targets(cloud)
    off_term = offset_l1(offsets, fg, fg_targets) * weights.offset
    sem_term = semantic_loss(semantic_logits, cloud) * weights.semantic
    total = (mask_term + cls_term) + (off_term + sem_term)

    parts = {
        "mask": mask_term.item(),
        "cls": cls_term.item(),
        "offset": off_term.item(),
        "semantic": sem_term.item(),
        "total": total.item(),
    }
    for name, value in parts.items():
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite {name} loss term")
    return total, LossBreakdown(
        mask_loss=parts["mask"],
        cls_loss=parts["cls"],
        offset_loss=parts["offset"],
        semantic_loss=parts["semantic"],
        total=parts["total"],
    )
