"""Bipartite assignment of the N predicted masks to the K ground-truth instances.

The assignment minimizes a BCE + dice + objectness cost and produces both the
matched pairs for the mask loss and the indicator vector for the objectness
loss.  The solver is a deterministic shortest-augmenting-path implementation
(ties resolved toward the lowest prediction index) so results are identical
across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .losses import DICE_SMOOTH
from .masks import CLAMP_EPS, BinaryMask, SoftMask
from .model import PredictionSet

# (w_obj, w_bce, w_dice): mirrors the objectness / mask loss weights so the
# matching optimizes the same geometry as training.
DEFAULT_COST_WEIGHTS = (2.0, 5.0, 5.0)

# Finite sentinel used to pad rectangular cost matrices to square form.
PAD_SENTINEL = 1e9


@dataclass(frozen=True)
class CostMatrix:
    """Matching costs, one row per prediction, one column per ground truth."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError("cost matrix must be 2-D")
        if not np.isfinite(vals).all():
            raise ValueError("cost matrix entries must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class MatchResult:
    """Matched (prediction, ground truth) index pairs plus the indicator vector."""

    pairs: tuple
    indicators: np.ndarray

    def __post_init__(self):
        pairs = tuple((int(p), int(g)) for p, g in self.pairs)
        v = np.ascontiguousarray(self.indicators, dtype=np.uint8)
        if v.ndim != 1:
            raise ValueError("indicators must be a flat binary vector")
        preds = [p for p, _ in pairs]
        gts = [g for _, g in pairs]
        if len(set(preds)) != len(preds) or len(set(gts)) != len(gts):
            raise ValueError("each prediction and ground truth may appear in at most one pair")
        matched = np.zeros(v.shape, dtype=np.uint8)
        for p in preds:
            if not 0 <= p < v.size:
                raise ValueError(f"prediction index {p} out of range")
            matched[p] = 1
        if not np.array_equal(matched, v):
            raise ValueError("indicator vector inconsistent with pairs")
        v.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "indicators", v)


def pair_cost(pred_mask: SoftMask, pred_score: float, gt: BinaryMask, cost_weights=DEFAULT_COST_WEIGHTS) -> float:
    """Matching cost of one (prediction, ground truth) pair.

    cost = w_obj * (-log score) + w_bce * BCE(mask, gt) + w_dice * dice(mask, gt),
    with the score clamped away from zero before the log.
    """
    w_obj, w_bce, w_dice = cost_weights
    p = pred_mask.data.ravel()
    t = gt.data.astype(np.float64).ravel()
    if pred_mask.data.shape != gt.data.shape:
        raise ValueError(f"mask dimension mismatch: {pred_mask.data.shape} vs {gt.data.shape}")
    bce_val, _, _ = _kernels.bce_grads(p, t, CLAMP_EPS)
    dice_val, _, _ = _kernels.dice_grads(p, t, DICE_SMOOTH)
    return w_obj * -math.log(max(float(pred_score), CLAMP_EPS)) + w_bce * bce_val + w_dice * dice_val


def _solve_lsap(cost: np.ndarray) -> np.ndarray:
    """Shortest augmenting path assignment for a square cost matrix.

    Returns col4row: the column assigned to each row.  Ties in the Dijkstra
    frontier resolve to the lowest column index (np.argmin convention).
    """
    n = cost.shape[0]
    u = np.zeros(n)
    v = np.zeros(n)
    path = np.full(n, -1, dtype=np.intp)
    col4row = np.full(n, -1, dtype=np.intp)
    row4col = np.full(n, -1, dtype=np.intp)

    for cur_row in range(n):
        min_val = 0.0
        i = cur_row
        remaining = np.ones(n, dtype=bool)
        visited_rows = np.zeros(n, dtype=bool)
        visited_cols = np.zeros(n, dtype=bool)
        shortest = np.full(n, np.inf)
        sink = -1
        while sink == -1:
            visited_rows[i] = True
            reduced = min_val + cost[i] - u[i] - v
            better = remaining & (reduced < shortest)
            shortest[better] = reduced[better]
            path[better] = i
            masked = np.where(remaining, shortest, np.inf)
            j = int(np.argmin(masked))
            min_val = float(masked[j])
            if not np.isfinite(min_val):
                raise ValueError("cost matrix is infeasible")
            remaining[j] = False
            visited_cols[j] = True
            if row4col[j] == -1:
                sink = j
            else:
                i = int(row4col[j])
        u[cur_row] += min_val
        extra = visited_rows.copy()
        extra[cur_row] = False
        rows = np.flatnonzero(extra)
        u[rows] += min_val - shortest[col4row[rows]]
        cols = np.flatnonzero(visited_cols)
        v[cols] -= min_val - shortest[cols]
        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break
    return col4row


def hungarian(cost) -> tuple:
    """Globally optimal assignment of the K ground truths to distinct predictions.

    Accepts a CostMatrix (or a raw (N, K) array with N >= K); rectangular
    input is padded to square with a large finite sentinel and the padded
    pairs are discarded.  Returns ((prediction, ground truth), ...) sorted by
    ground-truth index.
    """
    values = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    n, k = values.shape
    if n == 0 or k == 0:
        raise ValueError("cost matrix dimensions must be positive")
    if k > n:
        raise ValueError(f"need at least as many predictions as ground truths, got {n} x {k}")
    # rows = ground truths (padded), columns = predictions
    square = np.full((n, n), PAD_SENTINEL)
    square[:k, :] = values.T
    col4row = _solve_lsap(square)
    return tuple(sorted((int(col4row[g]), g) for g in range(k)))


def match(pred: PredictionSet, annotations: Sequence[BinaryMask], cost_weights=DEFAULT_COST_WEIGHTS) -> MatchResult:
    """Assign predictions to annotations and derive the indicator vector."""
    annotations = list(annotations)
    n = pred.num_queries
    k = len(annotations)
    if k > n:
        raise ValueError(f"{k} ground truths exceed the {n} available predictions")
    if k == 0:
        return MatchResult((), np.zeros(n, dtype=np.uint8))
    for gt in annotations:
        if gt.data.shape != pred.masks.shape[1:]:
            raise ValueError("annotation dimensions do not match predictions")
    w_obj, w_bce, w_dice = cost_weights
    mask_stack = pred.masks.reshape(n, -1)
    gt_stack = np.stack([g.data.astype(np.float64).ravel() for g in annotations])
    bce_vals, dice_vals = _kernels.bce_dice_values(mask_stack, gt_stack, CLAMP_EPS, DICE_SMOOTH)
    obj_col = -np.log(np.maximum(pred.scores, CLAMP_EPS))
    cost = CostMatrix(w_obj * obj_col[:, None] + w_bce * bce_vals + w_dice * dice_vals)
    pairs = hungarian(cost)
    indicators = np.zeros(n, dtype=np.uint8)
    for p, _ in pairs:
        indicators[p] = 1
    return MatchResult(pairs, indicators)
