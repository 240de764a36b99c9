"""Teacher-student pseudo-labeling.

The teacher is an exponential moving average of the student parameters.  Its
confident mask predictions become pseudo-proposals; proposals that overlap an
existing annotation are discarded (they are already labeled), the rest are
merged into the training targets as extra positive instances.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .masks import BinaryMask, binarize, iou
from .model import PredictionSet, ToyModel, forward

DEFAULT_EMA_DECAY = 0.999
DEFAULT_CONFIDENCE_THRESHOLD = 0.8
DEFAULT_IOU_EPSILON = 0.2


@dataclass(frozen=True)
class TeacherState:
    """Flat EMA copy of the student parameters (same layout)."""

    parameters: np.ndarray
    decay: float = DEFAULT_EMA_DECAY

    def __post_init__(self):
        params = np.ascontiguousarray(self.parameters, dtype=np.float64)
        if params.ndim != 1:
            raise ValueError("teacher parameters must be a flat vector")
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")
        params.setflags(write=False)
        object.__setattr__(self, "parameters", params)


@dataclass(frozen=True)
class PseudoProposal:
    """A confident teacher mask; ``accepted`` is set by the IoU filter."""

    mask: BinaryMask
    confidence: float
    accepted: bool = False

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


def ema_update(teacher: TeacherState, student_params) -> TeacherState:
    """theta_t <- decay * theta_t + (1 - decay) * theta_s, elementwise."""
    student = np.asarray(student_params, dtype=np.float64)
    if student.shape != teacher.parameters.shape:
        raise ValueError(
            f"parameter length mismatch: {student.shape} vs {teacher.parameters.shape}"
        )
    merged = teacher.decay * teacher.parameters + (1.0 - teacher.decay) * student
    return TeacherState(merged, teacher.decay)


def filter_by_confidence(pred: PredictionSet, threshold: float = DEFAULT_CONFIDENCE_THRESHOLD):
    """Queries whose objectness strictly exceeds the threshold, hardened at 0.5."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("confidence threshold must lie in (0, 1)")
    proposals = []
    for j in range(pred.num_queries):
        score = float(pred.scores[j])
        if score > threshold:
            proposals.append(PseudoProposal(binarize(pred.mask(j), 0.5), score))
    return proposals


def filter_by_iou(proposals: Sequence[PseudoProposal], gts: Sequence[BinaryMask], epsilon: float = DEFAULT_IOU_EPSILON):
    """Keep proposals whose best IoU against every annotation is at most epsilon.

    A proposal overlapping an annotation is already labeled and would be
    redundant (or noise); with no annotations at all every proposal passes.
    Returns the accepted subset with the accepted flag set.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    gts = list(gts)
    accepted = []
    for prop in proposals:
        best = max((iou(prop.mask, gt) for gt in gts), default=0.0)
        if best <= epsilon:
            accepted.append(dataclasses.replace(prop, accepted=True))
    return accepted


def merge(gts: Sequence[BinaryMask], accepted: Sequence[PseudoProposal]):
    """Ground truth first, then the accepted pseudo-masks as extra positives."""
    gts = list(gts)
    pseudo = [p.mask for p in accepted]
    shapes = {m.data.shape for m in gts + pseudo}
    if len(shapes) > 1:
        raise ValueError(f"mask dimension mismatch in merge: {sorted(shapes)}")
    return gts + pseudo


def generate_pseudo_labels(
    teacher: TeacherState,
    sample,
    conf_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD,
    epsilon: float = DEFAULT_IOU_EPSILON,
):
    """Full pipeline: teacher forward -> confidence filter -> IoU filter -> merge.

    The IoU filter runs against the sample's (possibly incomplete) visible
    annotations; the returned list is those annotations plus the surviving
    pseudo-masks.
    """
    feat_dim = sample.features.shape[2]
    total = teacher.parameters.size
    if total % feat_dim != 0 or (total // feat_dim - 1) % 2 != 0:
        raise ValueError("teacher parameter length inconsistent with feature dim")
    num_queries = (total // feat_dim - 1) // 2
    model = ToyModel.from_flat(teacher.parameters, num_queries, feat_dim)
    pred = forward(model, sample)
    proposals = filter_by_confidence(pred, conf_threshold)
    gts = sample.visible_masks()
    accepted = filter_by_iou(proposals, gts, epsilon)
    return merge(gts, accepted)
