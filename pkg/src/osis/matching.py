"""Candidate/ground-truth similarity and optimal one-to-one assignment.

Matching is a discrete training-time decision: everything here runs on
plain numpy values (no gradient tape). Losses later recompute
differentiably on the frozen assignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GroundTruthInstance
from .tensor import Tensor

_FORBID = 1e18  # cost used to exclude an edge when probing for alternate optima


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def dice_coefficient(m, m_gt) -> float:
    """2 m.m_gt / (m.m + m_gt.m_gt); the denominator gets 1e-6 only when
    both vectors are all-zero (yielding 0)."""
    m = _as_array(m).ravel()
    g = _as_array(m_gt).ravel()
    if m.shape != g.shape:
        raise ValueError(f"dice: length mismatch {m.shape} vs {g.shape}")
    denom = float(m @ m + g @ g)
    if denom == 0.0:
        denom = 1e-6
    return float(2.0 * (m @ g) / denom)


def similarity_matrix(
    class_probs, mask_probs, gts: list[GroundTruthInstance], alpha: float
) -> np.ndarray:
    """Q[i, j] = P(candidate i is class of gt j) + alpha * soft dice overlap."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    probs = _as_array(class_probs)
    masks = _as_array(mask_probs)
    if not gts:
        raise ValueError("similarity_matrix requires at least one ground truth")
    n_fg_classes = probs.shape[1] - 1
    classes = np.array([g.semantic_class for g in gts])
    if classes.min() < 0 or classes.max() >= n_fg_classes:
        raise ValueError(
            f"gt class out of range [0,{n_fg_classes}): {sorted(set(classes.tolist()))}"
        )
    gt_masks = np.stack([g.mask.astype(np.float64) for g in gts])  # (G, N)
    inter = masks.T @ gt_masks.T                                    # (k, G)
    denom = (masks * masks).sum(axis=0)[:, None] + (gt_masks * gt_masks).sum(axis=1)[None, :]
    dice = np.where(denom > 0.0, 2.0 * inter / np.where(denom > 0.0, denom, 1.0), 0.0)
    return probs[:, classes] + alpha * dice


@dataclass
class Assignment:
    """Partial injection candidates -> ground truths maximizing similarity."""

    pairs: list[tuple[int, int]]
    unmatched_candidates: list[int]
    total_similarity: float

    def gt_of_candidate(self) -> dict[int, int]:
        return dict(self.pairs)


def _lap_min(cost: np.ndarray) -> np.ndarray:
    """Min-cost assignment matching every row (rows <= cols); returns col per row.

    Shortest-augmenting-path with dual potentials; deterministic scan order.
    """
    nr, nc = cost.shape
    u = np.zeros(nr)
    v = np.zeros(nc + 1)
    row_of_col = np.full(nc + 1, -1, dtype=np.int64)  # column nc is the virtual start
    way = np.full(nc + 1, nc, dtype=np.int64)
    for r in range(nr):
        row_of_col[nc] = r
        j0 = nc
        minv = np.full(nc, np.inf)
        used = np.zeros(nc + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            cur = cost[i0] - u[i0] - v[:nc]
            unused = ~used[:nc]
            better = unused & (cur < minv)
            minv[better] = cur[better]
            way_main = way[:nc]
            way_main[better] = j0
            cand = np.where(unused, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            used_cols = np.flatnonzero(used)
            u[row_of_col[used_cols]] += delta
            v[used_cols] -= delta
            minv[unused] -= delta
            j0 = j1
            if row_of_col[j0] < 0:
                break
        while j0 != nc:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.full(nr, -1, dtype=np.int64)
    for j in range(nc):
        if row_of_col[j] >= 0:
            col_of_row[row_of_col[j]] = j
    return col_of_row


def _solve_pairs(q: np.ndarray) -> list[tuple[int, int]]:
    """Max-total pairs on a (k, G) similarity matrix, |pairs| = min(k, G)."""
    k, g = q.shape
    if min(k, g) == 0:
        return []
    if k <= g:
        cols = _lap_min(-q)
        return [(i, int(cols[i])) for i in range(k)]
    rows = _lap_min(-q.T)
    return sorted((int(rows[j]), j) for j in range(g))


def _pairs_total(q: np.ndarray, pairs: list[tuple[int, int]]) -> float:
    # summed in candidate order so equal pair sets give bit-equal totals
    return float(np.sum(np.array([q[i, j] for i, j in sorted(pairs)])))


def _solve_total(q: np.ndarray) -> float:
    return _pairs_total(q, _solve_pairs(q))


def _has_alternate_optimum(q: np.ndarray, pairs, total: float) -> bool:
    for i, j in pairs:
        probe = q.copy()
        probe[i, j] = -_FORBID
        if _solve_total(probe) == total:
            return True
    return False


def _lexicographic_optimum(q: np.ndarray, total: float) -> list[tuple[int, int]] | None:
    """Smallest pair set (sorted-pair lexicographic order) among exact optima.

    Greedy with forced-pair feasibility re-solves; exactness of float
    totals defines a tie. Returns None if rounding breaks verification.
    """
    k, g = q.shape
    free_c = list(range(k))
    free_g = list(range(g))
    chosen: list[tuple[int, int]] = []
    base = 0.0
    need = min(k, g)
    for i in range(k):
        if len(chosen) == need or not free_g:
            break
        sub_c = [c for c in free_c if c != i]
        fixed = False
        for j in free_g:
            sub_g = [x for x in free_g if x != j]
            t = base + q[i, j] + _solve_total(q[np.ix_(sub_c, sub_g)])
            if t == total:
                chosen.append((i, j))
                base += q[i, j]
                free_c = sub_c
                free_g = sub_g
                fixed = True
                break
        if not fixed:
            if len(sub_c) < need - len(chosen):
                return None
            if base + _solve_total(q[np.ix_(sub_c, free_g)]) != total:
                return None
            free_c = sub_c
    return chosen if len(chosen) == need else None


def hungarian_assign(q) -> Assignment:
    """Injection maximizing total similarity; |pairs| = min(k, G).

    Deterministic: among exactly-equal optima the lexicographically smallest
    pair set is returned.
    """
    q = _as_array(q)
    if q.ndim != 2:
        raise ValueError(f"similarity matrix must be 2-D, got shape {q.shape}")
    k, g = q.shape
    if k == 0 or g == 0:
        return Assignment(pairs=[], unmatched_candidates=list(range(k)), total_similarity=0.0)
    if not np.all(np.isfinite(q)):
        raise ValueError("similarity matrix must be finite")
    pairs = sorted(_solve_pairs(q))
    total = _pairs_total(q, pairs)
    if _has_alternate_optimum(q, pairs, total):
        canon = _lexicographic_optimum(q, total)
        if canon is not None:
            pairs = sorted(canon)
            total = _pairs_total(q, pairs)
    matched = {i for i, _ in pairs}
    return Assignment(
        pairs=pairs,
        unmatched_candidates=[i for i in range(k) if i not in matched],
        total_similarity=total,
    )
