"""Average-precision evaluation of instance masks against ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GroundTruthInstance
from .inference import Prediction

AP_THRESHOLDS = tuple(np.arange(0.50, 0.96, 0.05).round(2))


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap25: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)
    n_scenes: int = 0

    def to_dict(self) -> dict:
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP25": self.ap25,
            "per_class": {str(c): v for c, v in sorted(self.per_class.items())},
            "n_scenes": self.n_scenes,
        }


def _average_precision(flags: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from ranked TP/FP flags."""
    if n_gt == 0:
        return 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: max precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    area = 0.0
    for r, p, is_tp in zip(recall, env, flags):
        if is_tp:
            area += (r - prev_r) * p
            prev_r = r
    return float(area)


def _class_ap(
    entries: list[tuple[int, float, np.ndarray]],
    gts_by_scene: dict[int, list[GroundTruthInstance]],
    iou_thresh: float,
) -> float:
    """AP for one class at one IoU threshold.

    entries: (scene index, score, iou row vs that scene's class gts), ranked.
    Greedy: each prediction claims the unclaimed gt with highest IoU >= t
    (lowest index on ties).
    """
    n_gt = sum(len(v) for v in gts_by_scene.values())
    claimed = {s: np.zeros(len(v), dtype=bool) for s, v in gts_by_scene.items()}
    flags = np.zeros(len(entries), dtype=bool)
    for rank, (scene, _score, ious) in enumerate(entries):
        if scene not in claimed or ious.size == 0:
            continue
        avail = (~claimed[scene]) & (ious >= iou_thresh)
        if not avail.any():
            continue
        masked = np.where(avail, ious, -1.0)
        best = int(masked.argmax())  # argmax takes the first (lowest) index on ties
        claimed[scene][best] = True
        flags[rank] = True
    return _average_precision(flags, n_gt)


def evaluate(
    preds_per_scene: list[list[Prediction]],
    gts_per_scene: list[list[GroundTruthInstance]],
    iou_thresholds: tuple[float, ...] = AP_THRESHOLDS,
) -> EvalReport:
    """Greedy score-ranked matching per class and IoU threshold; AP is the
    all-point interpolated area, averaged over thresholds then classes.
    Classes with no ground truth anywhere are excluded from the mean."""
    if len(preds_per_scene) != len(gts_per_scene):
        raise ValueError("prediction and ground-truth scene counts differ")

    classes = sorted({g.semantic_class for gts in gts_per_scene for g in gts})
    gt_by_class: dict[int, dict[int, list[GroundTruthInstance]]] = {c: {} for c in classes}
    for s, gts in enumerate(gts_per_scene):
        for g in gts:
            gt_by_class[g.semantic_class].setdefault(s, []).append(g)

    # rank predictions per class by descending score (stable on scene/order)
    entries_by_class: dict[int, list[tuple[int, float, np.ndarray]]] = {c: [] for c in classes}
    for s, (preds, gts) in enumerate(zip(preds_per_scene, gts_per_scene)):
        for p in preds:
            if gts and p.mask.shape[0] != gts[0].mask.shape[0]:
                raise ValueError(
                    f"scene {s}: prediction mask length {p.mask.shape[0]} "
                    f"!= scene length {gts[0].mask.shape[0]}"
                )
            if p.semantic_class not in entries_by_class:
                continue  # class absent from all ground truth: excluded
            cls_gts = gt_by_class[p.semantic_class].get(s, [])
            pm = p.mask.astype(bool)
            ious = np.array(
                [
                    np.count_nonzero(pm & g.mask) / max(np.count_nonzero(pm | g.mask), 1)
                    for g in cls_gts
                ]
            )
            entries_by_class[p.semantic_class].append((s, p.score, ious))
    for c in classes:
        entries_by_class[c].sort(key=lambda e: -e[1])

    per_class: dict[int, dict[str, float]] = {}
    for c in classes:
        gts_by_scene = gt_by_class[c]
        entries = entries_by_class[c]
        ap_t = [_class_ap(entries, gts_by_scene, t) for t in iou_thresholds]
        per_class[c] = {
            "ap": float(np.mean(ap_t)),
            "ap50": _class_ap(entries, gts_by_scene, 0.50),
            "ap25": _class_ap(entries, gts_by_scene, 0.25),
            "n_gt": float(sum(len(v) for v in gts_by_scene.values())),
        }

    if per_class:
        ap = float(np.mean([v["ap"] for v in per_class.values()]))
        ap50 = float(np.mean([v["ap50"] for v in per_class.values()]))
        ap25 = float(np.mean([v["ap25"] for v in per_class.values()]))
    else:
        ap = ap50 = ap25 = 0.0
    return EvalReport(ap=ap, ap50=ap50, ap25=ap25, per_class=per_class, n_scenes=len(preds_per_scene))
