"""Training loops over the toy model: joint-loss optimization, the
semi-supervised two-phase protocol, the from-scratch AdamW optimizer, and the
finite-difference gradient checker.

Everything is a pure function of (seed, config, dataset): batches are drawn
round-robin, the labeled/unlabeled interleave is a deterministic
largest-remainder schedule, and gradient reductions run in fixed sample
order, so re-runs are bit-identical.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .data import Dataset, Sample, cutout
from .losses import (
    STOP_GRADIENT_MODES,
    STOP_GRADIENT_NONE,
    LossBreakdown,
    LossWeights,
    total_loss,
)
from .masks import (
    SOFT_UNION_MODES,
    SOFT_UNION_SIGMOID_OF_CONFIDENCES,
    union_foreground,
)
from .matching import match
from .model import PAPER_QUERY_COUNT, ToyModel, forward
from .pseudolabel import (
    DEFAULT_CONFIDENCE_THRESHOLD,
    DEFAULT_EMA_DECAY,
    DEFAULT_IOU_EPSILON,
    TeacherState,
    ema_update,
    generate_pseudo_labels,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

MODEL_FORMAT = "owis-lab.model.v1"
PARAMETER_LAYOUT = (
    "query_vectors (N, d) row-major, objectness_vectors (N, d) row-major, foreground_vector (d,)"
)

_CUTOUT_STREAM = 0xC7


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings; the defaults mirror the reference setup
    (learning rate 1e-4, decoupled weight decay 0.05, loss weights 5/1/1/2)."""

    iterations: int
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 4
    warmup_iterations: Optional[int] = None  # None -> 20% of iterations
    loss_weights: LossWeights = LossWeights()
    seed: int = 0
    num_queries: int = PAPER_QUERY_COUNT
    soft_union_mode: str = SOFT_UNION_SIGMOID_OF_CONFIDENCES
    stop_gradient: str = STOP_GRADIENT_NONE
    cutout: bool = False
    pseudo_labeling: bool = False
    ema_decay: float = DEFAULT_EMA_DECAY
    confidence_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD
    iou_epsilon: float = DEFAULT_IOU_EPSILON
    init_scale: float = 0.01

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if self.batch_size < 1 or self.num_queries < 1:
            raise ValueError("batch size and query count must be positive")
        if self.warmup_iterations is not None and not 0 <= self.warmup_iterations <= self.iterations:
            raise ValueError("warmup_iterations must lie in [0, iterations]")
        if self.soft_union_mode not in SOFT_UNION_MODES:
            raise ValueError(f"unknown soft union mode {self.soft_union_mode!r}")
        if self.stop_gradient not in STOP_GRADIENT_MODES:
            raise ValueError(f"unknown stop_gradient mode {self.stop_gradient!r}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError("confidence_threshold must lie in (0, 1)")
        if not 0.0 <= self.iou_epsilon <= 1.0:
            raise ValueError("iou_epsilon must lie in [0, 1]")

    @property
    def resolved_warmup(self) -> int:
        if self.warmup_iterations is not None:
            return self.warmup_iterations
        return int(round(0.2 * self.iterations))


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators plus the step count."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass(frozen=True)
class HistoryRow:
    """Batch-mean loss terms recorded at one iteration."""

    iteration: int
    mask_loss: float
    foreground_loss: float
    consistency_loss: float
    objectness_loss: float
    total: float


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    worst_index: int
    num_parameters: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def lr_multiplier(step: int, total_iterations: int) -> float:
    """Step schedule: x0.1 at 90% and again at 95% of the configured run."""
    mult = 1.0
    if total_iterations > 0:
        if step >= 0.9 * total_iterations:
            mult *= 0.1
        if step >= 0.95 * total_iterations:
            mult *= 0.1
    return mult


def adamw_update(params, grad, state: AdamState, lr: float, weight_decay: float):
    """Raw AdamW rule: adaptive moments with bias correction, then decoupled decay."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ValueError("parameter / gradient / state length mismatch")
    t = state.step + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS) - lr * weight_decay * params
    return new_params, AdamState(m, v, t)


def optimizer_step(params, grad, state: AdamState, config: TrainConfig):
    """One AdamW update at the scheduled learning rate for the current step."""
    lr = config.learning_rate * lr_multiplier(state.step, config.iterations)
    return adamw_update(params, grad, state, lr, config.weight_decay)


def loss_and_grad(model: ToyModel, sample: Sample, config: TrainConfig, annotations_override=None) -> LossBreakdown:
    """Joint loss and its exact gradient over the flat parameter layout.

    Labeled samples are re-matched on every call; unlabeled samples take the
    consistency-only route.  ``annotations_override`` substitutes the training
    targets (used for merged pseudo-labels).
    """
    pred = forward(model, sample)
    h, w = sample.height, sample.width
    feats = sample.features.reshape(h * w, model.feat_dim)
    if sample.labeled:
        annotations = annotations_override if annotations_override is not None else sample.visible_masks()
        match_result = match(pred, annotations)
        foreground_gt = union_foreground(annotations, height=h, width=w)
    else:
        annotations, match_result, foreground_gt = None, None, None
    tl = total_loss(
        pred,
        match_result,
        annotations,
        foreground_gt,
        config.loss_weights,
        labeled=sample.labeled,
        soft_union_mode=config.soft_union_mode,
        stop_gradient=config.stop_gradient,
    )
    n = model.num_queries
    masks_flat = pred.masks.reshape(n, -1)
    gm = tl.grad_masks.reshape(n, -1) * masks_flat * (1.0 - masks_flat)
    grad_q = gm @ feats
    fbar = feats.mean(axis=0)
    gs = tl.grad_scores * pred.scores * (1.0 - pred.scores)
    grad_r = gs[:, None] * fbar[None, :]
    fg_flat = pred.foreground.ravel()
    grad_w = feats.T @ (tl.grad_foreground.ravel() * fg_flat * (1.0 - fg_flat))
    gradient = np.concatenate([grad_q.ravel(), grad_r.ravel(), grad_w])
    return LossBreakdown(
        mask_loss=tl.mask_loss,
        foreground_loss=tl.foreground_loss,
        consistency_loss=tl.consistency_loss,
        objectness_loss=tl.objectness_loss,
        total=tl.total,
        gradient=gradient,
    )


def grad_check(
    model: ToyModel,
    sample: Sample,
    config: TrainConfig,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    abs_floor: float = 1e-6,
    corrupt_gradient: bool = False,
) -> GradCheckReport:
    """Central finite differences over every parameter of the joint loss.

    ``corrupt_gradient`` is a self-test hook: it perturbs one analytic entry
    so a healthy checker must report failure.
    """
    analytic = loss_and_grad(model, sample, config).gradient.copy()
    if corrupt_gradient:
        analytic[0] += 1e-2
    flat = model.to_flat()

    def value_at(params):
        probe = ToyModel.from_flat(params, model.num_queries, model.feat_dim)
        return loss_and_grad(probe, sample, config).total

    worst_err = 0.0
    worst_index = -1
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += step
        minus = flat.copy()
        minus[i] -= step
        fd = (value_at(plus) - value_at(minus)) / (2.0 * step)
        denom = max(abs(analytic[i]), abs(fd), abs_floor)
        err = abs(analytic[i] - fd) / denom
        if err > worst_err:
            worst_err = err
            worst_index = i
    return GradCheckReport(worst_err, worst_index, flat.size, tolerance)


def _init_run(config: TrainConfig, feat_dim: int):
    model = ToyModel.init_random(config.num_queries, feat_dim, config.seed, config.init_scale)
    opt = AdamState.zeros(model.num_parameters)
    teacher = TeacherState(model.to_flat(), config.ema_decay)
    cut_rng = np.random.default_rng([config.seed, _CUTOUT_STREAM])
    return model, opt, teacher, cut_rng


def _batch_step(model, batch, config, opt, teacher, sparse, cut_rng, iteration, on_sample):
    grad_sum = np.zeros(model.num_parameters)
    terms = np.zeros(5)
    for sample in batch:
        view = cutout(sample, cut_rng) if config.cutout else sample
        override = None
        if config.pseudo_labeling and sparse and view.labeled:
            override = generate_pseudo_labels(
                teacher, view, config.confidence_threshold, config.iou_epsilon
            )
        bd = loss_and_grad(model, view, config, annotations_override=override)
        if on_sample is not None:
            on_sample(iteration, sample, bd)
        grad_sum += bd.gradient
        terms += (bd.mask_loss, bd.foreground_loss, bd.consistency_loss, bd.objectness_loss, bd.total)
    grad = grad_sum / len(batch)
    terms /= len(batch)
    new_flat, opt = optimizer_step(model.to_flat(), grad, opt, config)
    model = ToyModel.from_flat(new_flat, model.num_queries, model.feat_dim)
    teacher = ema_update(teacher, new_flat)
    row = HistoryRow(iteration, *terms)
    return model, opt, teacher, row


def train_fully(dataset: Dataset, config: TrainConfig, on_sample: Optional[Callable] = None):
    """Fully-supervised loop over the labeled samples (round-robin batches).

    Per iteration: (optional) cutout, (optional, sparse datasets) pseudo-label
    merge, matching, joint loss, AdamW step, EMA teacher update.
    """
    labeled = [s for s in dataset.samples if s.labeled]
    if not labeled:
        raise ValueError("train_fully requires a nonempty labeled dataset")
    sparse = bool(dataset.manifest.sparse_annotations) if dataset.manifest else False
    model, opt, teacher, cut_rng = _init_run(config, labeled[0].features.shape[2])
    history = []
    cursor = 0
    for it in range(config.iterations):
        batch = [labeled[(cursor + j) % len(labeled)] for j in range(config.batch_size)]
        cursor += config.batch_size
        model, opt, teacher, row = _batch_step(
            model, batch, config, opt, teacher, sparse, cut_rng, it, on_sample
        )
        history.append(row)
    return model, history


def train_semi(labeled_set: Dataset, unlabeled_set: Dataset, config: TrainConfig, on_sample: Optional[Callable] = None):
    """Two-phase semi-supervised protocol.

    Phase 1 warms up on the labeled set with the full joint loss; phase 2
    interleaves labeled (full loss) and unlabeled (consistency-only) samples
    at the dataset-size ratio on a deterministic largest-remainder schedule.
    """
    labeled = [s for s in labeled_set.samples if s.labeled]
    if not labeled:
        raise ValueError("train_semi requires a nonempty labeled set")
    unlabeled = [
        dataclasses.replace(s, labeled=False, visible_annotations=()) for s in unlabeled_set.samples
    ]
    warmup = config.resolved_warmup
    model, opt, teacher, cut_rng = _init_run(config, labeled[0].features.shape[2])
    history = []
    l_cursor = 0
    u_cursor = 0
    frac = len(labeled) / (len(labeled) + len(unlabeled)) if unlabeled else 1.0
    slot = 0
    for it in range(config.iterations):
        batch = []
        for _ in range(config.batch_size):
            if it < warmup:
                take_labeled = True
            else:
                take_labeled = math.floor((slot + 1) * frac) > math.floor(slot * frac)
                slot += 1
            if take_labeled:
                batch.append(labeled[l_cursor % len(labeled)])
                l_cursor += 1
            else:
                batch.append(unlabeled[u_cursor % len(unlabeled)])
                u_cursor += 1
        model, opt, teacher, row = _batch_step(
            model, batch, config, opt, teacher, False, cut_rng, it, on_sample
        )
        history.append(row)
    return model, history


# --- checkpoint and metric files -------------------------------------------


def save_checkpoint(model: ToyModel, path) -> None:
    payload = {
        "format": MODEL_FORMAT,
        "num_queries": model.num_queries,
        "feature_dim": model.feat_dim,
        "layout": PARAMETER_LAYOUT,
        "parameters": model.to_flat().tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path) -> ToyModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    return ToyModel.from_flat(
        np.array(payload["parameters"], dtype=np.float64),
        payload["num_queries"],
        payload["feature_dim"],
    )


def write_history_csv(history, path) -> None:
    lines = ["iteration,mask_loss,foreground_loss,consistency_loss,objectness_loss,total"]
    for row in history:
        lines.append(
            f"{row.iteration},{row.mask_loss!r},{row.foreground_loss!r},"
            f"{row.consistency_loss!r},{row.objectness_loss!r},{row.total!r}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
