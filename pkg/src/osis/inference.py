"""NMS-free inference, optional matrix-NMS ablation path, stage timing."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .backbone import backbone_apply, prepare_scene
from .geometry import PointCloud
from .model import Model
from .tensor import no_grad


@dataclass
class Prediction:
    """One predicted instance: nonempty binary point mask, foreground class,
    confidence in [0,1]."""

    mask: np.ndarray
    semantic_class: int
    score: float


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def filter_candidates(
    class_logits: np.ndarray,
    mask_logits: np.ndarray,
    score_thresh: float,
    mask_thresh: float,
) -> list[Prediction]:
    """Keep candidates that beat the background class, clear the score
    threshold, and binarize to a nonempty mask. No cross-candidate coupling:
    each decision depends on that candidate alone."""
    probs = _softmax_rows(class_logits)
    fg = probs[:, :-1]
    bg = probs[:, -1]
    best = fg.argmax(axis=1)
    scores = fg[np.arange(fg.shape[0]), best]
    out = []
    for j in range(fg.shape[0]):
        if bg[j] > scores[j] or scores[j] < score_thresh:
            continue
        mask = _sigmoid(mask_logits[:, j]) > mask_thresh
        if not mask.any():
            continue
        out.append(Prediction(mask=mask, semantic_class=int(best[j]), score=float(scores[j])))
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def infer_scene_traced(
    cloud: PointCloud,
    model: Model,
    score_thresh: float = 0.3,
    mask_thresh: float = 0.5,
    use_matrix_nms: bool = False,
    nms_sigma: float = 0.5,
) -> tuple[list[Prediction], list[tuple[str, float]]]:
    """infer_scene plus the executed (stage, seconds) trace."""
    stages: list[tuple[str, float]] = []
    with no_grad():
        t0 = time.perf_counter()
        prep = prepare_scene(cloud, model.config.voxel_size)
        prep.scale.submanifold_table()
        stages.append(("voxelize", time.perf_counter() - t0))

        t0 = time.perf_counter()
        out = backbone_apply(prep, model.backbone)
        stages.append(("backbone", time.perf_counter() - t0))

        t0 = time.perf_counter()
        inst = model.decoder.decode(out, cloud.positions)
        stages.append(("decode", time.perf_counter() - t0))

        t0 = time.perf_counter()
        preds = filter_candidates(
            inst.class_logits.data, inst.mask_logits.data, score_thresh, mask_thresh
        )
        stages.append(("filter", time.perf_counter() - t0))

        if use_matrix_nms:
            t0 = time.perf_counter()
            preds = matrix_nms(preds, sigma=nms_sigma, score_thresh=score_thresh)
            stages.append(("suppress", time.perf_counter() - t0))
    return preds, stages


def infer_scene(
    cloud: PointCloud,
    model: Model,
    score_thresh: float = 0.3,
    mask_thresh: float = 0.5,
    use_matrix_nms: bool = False,
    nms_sigma: float = 0.5,
) -> list[Prediction]:
    """Forward + decode + per-candidate filtering; no suppression or
    clustering on the default path."""
    preds, _ = infer_scene_traced(
        cloud, model, score_thresh, mask_thresh, use_matrix_nms, nms_sigma
    )
    return preds


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b|; 0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask_iou: length mismatch {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def matrix_nms(
    preds: list[Prediction], sigma: float = 0.5, score_thresh: float = 0.3
) -> list[Prediction]:
    """Gaussian matrix suppression (ablation path only).

    Each score is decayed by min over higher-scored same-class predictions i
    of exp(-(iou^2 - cmax_i^2)/sigma), cmax_i being i's own strongest
    higher-scored overlap; the factor is clamped at 1 so no score ever
    increases. Survivors are re-filtered by score_thresh.
    """
    if len(preds) <= 1:
        return list(preds)
    order = sorted(range(len(preds)), key=lambda j: (-preds[j].score, j))
    masks = np.stack([preds[j].mask for j in order]).astype(np.float64)
    classes = np.array([preds[j].semantic_class for j in order])
    scores = np.array([preds[j].score for j in order])

    inter = masks @ masks.T
    areas = masks.sum(axis=1)
    union = areas[:, None] + areas[None, :] - inter
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)

    n = len(order)
    same = classes[:, None] == classes[None, :]
    higher = np.tril(np.ones((n, n), dtype=bool), k=-1)  # [j, i] true when i ranks above j
    sup = same & higher.T  # sup[i, j]: i suppresses j
    cmax = np.zeros(n)
    for i in range(n):
        above = sup[:, i]
        if above.any():
            cmax[i] = iou[above, i].max()
    decay = np.ones(n)
    for j in range(n):
        sups = np.flatnonzero(sup[:, j])
        if sups.size:
            factors = np.exp(-(iou[sups, j] ** 2 - cmax[sups] ** 2) / sigma)
            decay[j] = min(1.0, factors.min())
    new_scores = scores * decay

    out = []
    for rank, j in enumerate(order):
        if new_scores[rank] >= score_thresh:
            out.append(
                Prediction(
                    mask=preds[j].mask,
                    semantic_class=preds[j].semantic_class,
                    score=float(new_scores[rank]),
                )
            )
    return out


def benchmark(
    scenes: list[PointCloud],
    model: Model,
    repeats: int = 3,
    score_thresh: float = 0.3,
    mask_thresh: float = 0.5,
) -> dict:
    """Per-stage wall-clock statistics for the default inference path.

    Returns machine-readable rows {stage, mean_ms, median_ms} plus the
    executed stage list and the mean per-scene total.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    per_stage: dict[str, list[float]] = {}
    totals: list[float] = []
    stage_names: list[str] = []
    for _ in range(repeats):
        for cloud in scenes:
            t0 = time.perf_counter()
            _, stages = infer_scene_traced(cloud, model, score_thresh, mask_thresh)
            totals.append(time.perf_counter() - t0)
            stage_names = [name for name, _ in stages]
            for name, dt in stages:
                per_stage.setdefault(name, []).append(dt)
    rows = [
        {
            "stage": name,
            "mean_ms": float(np.mean(per_stage[name]) * 1e3),
            "median_ms": float(np.median(per_stage[name]) * 1e3),
        }
        for name in stage_names
    ]
    rows.append(
        {
            "stage": "total",
            "mean_ms": float(np.mean(totals) * 1e3),
            "median_ms": float(np.median(totals) * 1e3),
        }
    )
    return {"stages": stage_names, "rows": rows, "repeats": repeats, "n_scenes": len(scenes)}
