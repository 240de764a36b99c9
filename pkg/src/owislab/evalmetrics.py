"""Class-agnostic average precision / recall over binary masks.

The protocol is the standard one for detection benchmarks: greedy matching of
score-ranked detections to ground truths per IoU threshold, pooled
precision-recall curves sampled at 101 recall points, and metrics averaged
over the IoU thresholds 0.50:0.05:0.95.  Size buckets use ignore semantics:
out-of-bucket ground truths never count against recall, and detections
matched to them (or unmatched with out-of-bucket area) are dropped from the
precision pool rather than counted as false positives.

Area buckets are scaled to the small canvases used here: small < 8^2 pixels,
medium 8^2..24^2, large > 24^2.  Empty buckets report the sentinel -1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .data import Dataset
from .masks import BinaryMask, binarize
from .model import ToyModel, forward

SENTINEL = -1.0

DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

AREA_SMALL_MAX = 8.0**2
AREA_MEDIUM_MAX = 24.0**2


@dataclass(frozen=True)
class Detection:
    """One hardened mask with its objectness score."""

    mask: BinaryMask
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("detection score must lie in [0, 1]")


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = DEFAULT_IOU_THRESHOLDS
    max_detections: tuple = (1, 10, 100)
    area_small_max: float = AREA_SMALL_MAX
    area_medium_max: float = AREA_MEDIUM_MAX
    binarize_threshold: float = 0.5

    def __post_init__(self):
        ts = tuple(float(t) for t in self.iou_thresholds)
        if not ts or any(not 0.0 < t < 1.0 for t in ts) or any(a >= b for a, b in zip(ts, ts[1:])):
            raise ValueError("iou thresholds must be strictly increasing within (0, 1)")
        object.__setattr__(self, "iou_thresholds", ts)
        object.__setattr__(self, "max_detections", tuple(int(m) for m in self.max_detections))

    @property
    def detection_budget(self) -> int:
        return max(self.max_detections)


@dataclass(frozen=True)
class EvalReport:
    AP100: float
    APs: float
    APm: float
    APl: float
    AR100: float
    AR10: float

    def as_dict(self) -> dict:
        return {
            "AP100": self.AP100,
            "APs": self.APs,
            "APm": self.APm,
            "APl": self.APl,
            "AR100": self.AR100,
            "AR10": self.AR10,
        }


def _sorted_inds(scores) -> list:
    # stable descending sort; ties keep insertion order
    return sorted(range(len(scores)), key=lambda i: -scores[i])


def _greedy_match(ious: np.ndarray, gt_ignore: np.ndarray, threshold: float) -> np.ndarray:
    """Detections (rows, already in score order) greedily take the unmatched
    ground truth with the highest IoU >= threshold; non-ignored ground truths
    are preferred, ties break toward the lowest index."""
    n_det, n_gt = ious.shape
    gt_order = sorted(range(n_gt), key=lambda g: bool(gt_ignore[g]))  # stable: real gts first
    matched = np.zeros(n_gt, dtype=bool)
    det_match = np.full(n_det, -1, dtype=np.intp)
    for d in range(n_det):
        best = -1
        best_iou = 0.0
        for g in gt_order:
            if matched[g]:
                continue
            if best != -1 and not gt_ignore[best] and gt_ignore[g]:
                break  # a real match is in hand; never trade it for an ignored gt
            if ious[d, g] < threshold:
                continue
            if best != -1 and ious[d, g] <= best_iou:
                continue
            best = g
            best_iou = float(ious[d, g])
        if best != -1:
            matched[best] = True
            det_match[d] = best
    return det_match


def match_detections(detections, gts, iou_threshold: float, max_dets: int):
    """Greedy score-ordered matching for one image (no area filtering).

    Returns (tp flags over the considered detections in score order,
    per-ground-truth matched flags, the considered detection indices).
    """
    detections = list(detections)
    gts = list(gts)
    order = _sorted_inds([d.score for d in detections])[:max_dets]
    if not gts or not order:
        return np.zeros(len(order), dtype=bool), np.zeros(len(gts), dtype=bool), order
    det_stack = np.stack([detections[i].mask.data.ravel() for i in order])
    gt_stack = np.stack([g.data.ravel() for g in gts])
    if det_stack.shape[1] != gt_stack.shape[1]:
        raise ValueError("detection / ground-truth dimensions do not match")
    ious = _kernels.iou_pairs(det_stack, gt_stack)
    det_match = _greedy_match(ious, np.zeros(len(gts), dtype=bool), iou_threshold)
    gt_matched = np.zeros(len(gts), dtype=bool)
    for g in det_match[det_match >= 0]:
        gt_matched[g] = True
    return det_match >= 0, gt_matched, order


def _ap_101(pooled, num_gts: int) -> float:
    """101-point interpolated AP from pooled (score, image, index, tp) rows."""
    if num_gts == 0:
        return 0.0
    if not pooled:
        return 0.0
    pooled = sorted(pooled, key=lambda row: (-row[0], row[1], row[2]))
    tp = np.array([row[3] for row in pooled], dtype=np.float64)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / num_gts
    precision = tp_cum / (tp_cum + fp_cum)
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    out = 0.0
    for r in RECALL_POINTS:
        idx = np.searchsorted(recall, r, side="left")
        if idx < len(precision):
            out += precision[idx]
    return out / len(RECALL_POINTS)


def average_precision(flag_streams, num_gts: int) -> float:
    """Mean 101-point AP over per-threshold pooled detection streams.

    Each stream is an iterable of (score, image_index, detection_index,
    is_true_positive) rows pooled across the dataset for one IoU threshold.
    With no ground truths and no detections the result is defined as 0.
    """
    streams = [list(s) for s in flag_streams]
    if not streams:
        raise ValueError("at least one flag stream is required")
    return float(np.mean([_ap_101(s, num_gts) for s in streams]))


def average_recall(matched_counts, num_gts: int) -> float:
    """Mean fraction of matched ground truths over per-threshold counts."""
    counts = list(matched_counts)
    if not counts:
        raise ValueError("at least one matched count is required")
    if num_gts == 0:
        return 0.0
    return float(np.mean([c / num_gts for c in counts]))


class _ImageEval:
    """Per-image IoU matrix plus areas, reused across thresholds and buckets."""

    def __init__(self, detections, gts, budget: int):
        self.order = _sorted_inds([d.score for d in detections])[:budget]
        self.scores = [detections[i].score for i in self.order]
        self.det_areas = np.array([detections[i].mask.area for i in self.order], dtype=np.float64)
        self.gt_areas = np.array([g.area for g in gts], dtype=np.float64)
        if self.order and gts:
            det_stack = np.stack([detections[i].mask.data.ravel() for i in self.order])
            gt_stack = np.stack([g.data.ravel() for g in gts])
            self.ious = _kernels.iou_pairs(det_stack, gt_stack)
        else:
            self.ious = np.zeros((len(self.order), len(gts)))

    def run(self, threshold: float, max_dets: int, area_range=None):
        """Returns (rows for the AP pool, number of counted gts, matched count)."""
        n_det = min(len(self.order), max_dets)
        if area_range is None:
            gt_ignore = np.zeros(len(self.gt_areas), dtype=bool)
            det_outside = np.zeros(n_det, dtype=bool)
        else:
            lo, hi = area_range
            gt_ignore = (self.gt_areas < lo) | (self.gt_areas > hi)
            det_outside = (self.det_areas[:n_det] < lo) | (self.det_areas[:n_det] > hi)
        det_match = _greedy_match(self.ious[:n_det], gt_ignore, threshold)
        rows = []
        matched = 0
        for d in range(n_det):
            g = det_match[d]
            if g >= 0:
                if gt_ignore[g]:
                    continue  # matched an out-of-bucket gt: drop from the pool
                matched += 1
                rows.append((self.scores[d], d, True))
            else:
                if det_outside[d]:
                    continue  # unmatched and out of bucket: drop from the pool
                rows.append((self.scores[d], d, False))
        return rows, int((~gt_ignore).sum()), matched


def evaluate_detections(per_image_detections, per_image_gts, config: EvalConfig = EvalConfig()) -> EvalReport:
    """Full report from externally supplied detections (oracle path included)."""
    if len(per_image_detections) != len(per_image_gts):
        raise ValueError("detections and ground truths must cover the same images")
    images = [
        _ImageEval(dets, gts, config.detection_budget)
        for dets, gts in zip(per_image_detections, per_image_gts)
    ]
    # areas are integer pixel counts; half-unit offsets give
    # small: a < small_max, medium: small_max <= a <= medium_max, large: a > medium_max
    buckets = {
        "s": (0.0, config.area_small_max - 0.5),
        "m": (config.area_small_max - 0.5, config.area_medium_max),
        "l": (config.area_medium_max + 0.5, float("inf")),
    }

    def pooled_ap(max_dets, area_range):
        streams = []
        num_gts = 0
        for t_idx, threshold in enumerate(config.iou_thresholds):
            rows = []
            gts_at_t = 0
            for img_idx, img in enumerate(images):
                img_rows, n_gt, _ = img.run(threshold, max_dets, area_range)
                rows.extend((score, img_idx, d, tp) for score, d, tp in img_rows)
                gts_at_t += n_gt
            streams.append(rows)
            num_gts = gts_at_t  # identical across thresholds
        if num_gts == 0:
            return None
        return average_precision(streams, num_gts)

    def pooled_ar(max_dets):
        counts = []
        num_gts = 0
        for threshold in config.iou_thresholds:
            matched = 0
            gts_at_t = 0
            for img in images:
                _, n_gt, m = img.run(threshold, max_dets, None)
                matched += m
                gts_at_t += n_gt
            counts.append(matched)
            num_gts = gts_at_t
        if num_gts == 0:
            return 0.0
        return average_recall(counts, num_gts)

    budget = config.detection_budget
    ap100 = pooled_ap(budget, None)
    return EvalReport(
        AP100=0.0 if ap100 is None else ap100,  # no gts and no dets -> 0 by definition
        APs=_or_sentinel(pooled_ap(budget, buckets["s"])),
        APm=_or_sentinel(pooled_ap(budget, buckets["m"])),
        APl=_or_sentinel(pooled_ap(budget, buckets["l"])),
        AR100=pooled_ar(100),
        AR10=pooled_ar(10),
    )


def _or_sentinel(value):
    return SENTINEL if value is None else value


def detections_from_prediction(pred, config: EvalConfig = EvalConfig()):
    """Inference output: hardened masks ranked by objectness, top-budget kept.

    The foreground branch is not consulted here; detection output is masks
    plus scores only.
    """
    order = _sorted_inds(list(pred.scores))[: config.detection_budget]
    return [Detection(binarize(pred.mask(j), config.binarize_threshold), float(pred.scores[j])) for j in order]


def evaluate(model: ToyModel, dataset: Dataset, config: EvalConfig = EvalConfig()) -> EvalReport:
    """Run inference over the dataset and score against the dense oracle labels.

    Evaluation always uses the full annotations, never the dropped view.
    """
    per_image_dets = []
    per_image_gts = []
    for sample in dataset.samples:
        pred = forward(model, sample)
        per_image_dets.append(detections_from_prediction(pred, config))
        per_image_gts.append(sample.full_masks())
    return evaluate_detections(per_image_dets, per_image_gts, config)
