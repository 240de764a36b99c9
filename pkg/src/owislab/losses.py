"""Loss terms of the joint objective, each with its exact analytic gradient.

All per-pixel losses reduce by the mean so magnitudes are resolution
independent.  Gradients are the exact derivatives of the implemented
expressions (including the confidence clamp, whose derivative is zero where
it is active), so they match central finite differences to first order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from . import _kernels
from .masks import (
    CLAMP_EPS,
    SOFT_UNION_MODES,
    SOFT_UNION_SIGMOID_OF_CONFIDENCES,
    SOFT_UNION_SIGMOID_OF_LOGITS,
    BinaryMask,
    SoftMask,
)

if TYPE_CHECKING:
    from .matching import MatchResult
    from .model import PredictionSet

DICE_SMOOTH = 1.0

STOP_GRADIENT_NONE = "none"
STOP_GRADIENT_THROUGH_GHAT = "through_Ghat"
STOP_GRADIENT_THROUGH_F = "through_F"
STOP_GRADIENT_MODES = (STOP_GRADIENT_NONE, STOP_GRADIENT_THROUGH_GHAT, STOP_GRADIENT_THROUGH_F)


@dataclass(frozen=True)
class LossWeights:
    """Term weights of the joint loss: total = alpha*L_m + beta*L_p + gamma*L_c + omega*L_o."""

    alpha: float = 5.0
    beta: float = 1.0
    gamma: float = 1.0
    omega: float = 2.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "omega"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted term values, the weighted total, and the flat parameter gradient."""

    mask_loss: float
    foreground_loss: float
    consistency_loss: float
    objectness_loss: float
    total: float
    gradient: np.ndarray

    def __post_init__(self):
        grad = np.ascontiguousarray(self.gradient, dtype=np.float64)
        if not np.isfinite(grad).all():
            raise ValueError("gradient contains non-finite entries")
        grad.setflags(write=False)
        object.__setattr__(self, "gradient", grad)


@dataclass(frozen=True)
class TotalLoss:
    """Joint loss with gradients in prediction space (masks / scores / foreground)."""

    mask_loss: float
    foreground_loss: float
    consistency_loss: float
    objectness_loss: float
    total: float
    grad_masks: np.ndarray
    grad_scores: np.ndarray
    grad_foreground: np.ndarray


def _target_array(target) -> np.ndarray:
    if isinstance(target, (SoftMask, BinaryMask)):
        return target.data.astype(np.float64, copy=False)
    return np.asarray(target, dtype=np.float64)


def _check_same_shape(pred: np.ndarray, target: np.ndarray):
    if pred.shape != target.shape:
        raise ValueError(f"pred/target dimension mismatch: {pred.shape} vs {target.shape}")


def bce(pred: SoftMask, target) -> tuple:
    """Mean binary cross-entropy; target may be binary or soft.

    Returns (value, gradient w.r.t. pred) with the gradient shaped like the
    mask.  Predictions are clamped into [CLAMP_EPS, 1-CLAMP_EPS] before the
    logs and the gradient is exactly zero where the clamp is active.
    """
    p = pred.data
    t = _target_array(target)
    _check_same_shape(p, t)
    value, dpred, _ = _kernels.bce_grads(p.ravel(), t.ravel(), CLAMP_EPS)
    return value, dpred.reshape(p.shape)


def dice(pred: SoftMask, target) -> tuple:
    """Smoothed soft-dice loss 1 - (2*sum(p*t)+s)/(sum(p)+sum(t)+s), s=1.

    Returns (value, gradient w.r.t. pred).
    """
    p = pred.data
    t = _target_array(target)
    _check_same_shape(p, t)
    value, dpred, _ = _kernels.dice_grads(p.ravel(), t.ravel(), DICE_SMOOTH)
    return value, dpred.reshape(p.shape)


def _consistency_flat(mask_stack: np.ndarray, fg_flat: np.ndarray, mode: str, stop_gradient: str):
    """Core consistency loss on flat arrays: stack (N, P), foreground (P,)."""
    if mode not in SOFT_UNION_MODES:
        raise ValueError(f"unknown soft union mode {mode!r}")
    if stop_gradient not in STOP_GRADIENT_MODES:
        raise ValueError(f"unknown stop_gradient mode {stop_gradient!r}")
    ghat, dghat = _kernels.soft_union(mask_stack, mode == SOFT_UNION_SIGMOID_OF_LOGITS, CLAMP_EPS)
    d_val, d_dpred, d_dtgt = _kernels.dice_grads(fg_flat, ghat, DICE_SMOOTH)
    b_val, b_dpred, b_dtgt = _kernels.bce_grads(fg_flat, ghat, CLAMP_EPS)
    value = d_val + b_val
    if stop_gradient == STOP_GRADIENT_THROUGH_F:
        grad_fg = np.zeros_like(fg_flat)
    else:
        grad_fg = d_dpred + b_dpred
    if stop_gradient == STOP_GRADIENT_THROUGH_GHAT:
        grad_masks = np.zeros_like(mask_stack)
    else:
        grad_masks = (d_dtgt + b_dtgt)[None, :] * dghat
    return value, grad_masks, grad_fg


def consistency_loss(
    pred_masks: Sequence[SoftMask],
    foreground_pred: SoftMask,
    mode: str = SOFT_UNION_SIGMOID_OF_CONFIDENCES,
    stop_gradient: str = STOP_GRADIENT_NONE,
) -> tuple:
    """Cross-task consistency: dice + BCE between the foreground prediction
    and the soft union of the instance masks (the union acting as the soft
    target).

    Gradients flow into both sides by default, so the mask branch and the
    foreground branch correct each other; ``stop_gradient`` can freeze either
    direction.  Returns (value, grad per mask (N, H, W), grad foreground).
    """
    pred_masks = list(pred_masks)
    if not pred_masks:
        raise ValueError("consistency loss requires at least one predicted mask")
    fg = foreground_pred.data
    for m in pred_masks:
        _check_same_shape(m.data, fg)
    stack = np.stack([m.data.ravel() for m in pred_masks])
    value, grad_masks, grad_fg = _consistency_flat(stack, fg.ravel(), mode, stop_gradient)
    n = len(pred_masks)
    return value, grad_masks.reshape((n,) + fg.shape), grad_fg.reshape(fg.shape)


def mask_loss(matched_pairs) -> tuple:
    """Mean of (BCE + dice) over matched (prediction, ground-truth) pairs.

    An empty pair list (no annotated instances) contributes zero loss and
    zero gradients.  Returns (value, list of per-pair gradients w.r.t. the
    predicted masks).
    """
    pairs = list(matched_pairs)
    if not pairs:
        return 0.0, []
    value = 0.0
    grads = []
    for pred, gt in pairs:
        p = pred.data
        t = _target_array(gt)
        _check_same_shape(p, t)
        b_val, b_grad, _ = _kernels.bce_grads(p.ravel(), t.ravel(), CLAMP_EPS)
        d_val, d_grad, _ = _kernels.dice_grads(p.ravel(), t.ravel(), DICE_SMOOTH)
        value += b_val + d_val
        grads.append((b_grad + d_grad).reshape(p.shape))
    n = len(pairs)
    return value / n, [g / n for g in grads]


def foreground_loss(foreground_pred: SoftMask, foreground_gt: BinaryMask) -> tuple:
    """BCE + dice of the foreground prediction against the union ground truth."""
    p = foreground_pred.data
    t = _target_array(foreground_gt)
    _check_same_shape(p, t)
    b_val, b_grad, _ = _kernels.bce_grads(p.ravel(), t.ravel(), CLAMP_EPS)
    d_val, d_grad, _ = _kernels.dice_grads(p.ravel(), t.ravel(), DICE_SMOOTH)
    return b_val + d_val, (b_grad + d_grad).reshape(p.shape)


def objectness_loss(scores, indicators) -> tuple:
    """Mean BCE of the per-query objectness scores against the match indicators."""
    s = np.asarray(scores, dtype=np.float64)
    v = np.asarray(indicators, dtype=np.float64)
    if s.shape != v.shape or s.ndim != 1:
        raise ValueError(f"scores/indicators length mismatch: {s.shape} vs {v.shape}")
    value, dpred, _ = _kernels.bce_grads(s, v, CLAMP_EPS)
    return value, dpred


def total_loss(
    pred: "PredictionSet",
    match: Optional["MatchResult"],
    annotations,
    foreground_gt: Optional[BinaryMask],
    weights: LossWeights,
    labeled: bool,
    soft_union_mode: str = SOFT_UNION_SIGMOID_OF_CONFIDENCES,
    stop_gradient: str = STOP_GRADIENT_NONE,
) -> TotalLoss:
    """Weighted joint loss with gradients in prediction space.

    Labeled samples combine all four terms; unlabeled samples use the
    consistency term alone (the other terms are reported as 0).  The caller
    chains the returned gradients through the forward pass to obtain the
    parameter-space ``LossBreakdown``.
    """
    n, h, w = pred.masks.shape
    n_pix = h * w
    mask_stack = pred.masks.reshape(n, n_pix)
    fg_flat = pred.foreground.ravel()

    c_val, c_gmasks, c_gfg = _consistency_flat(mask_stack, fg_flat, soft_union_mode, stop_gradient)

    grad_masks = weights.gamma * c_gmasks
    grad_fg = weights.gamma * c_gfg
    grad_scores = np.zeros(n)

    if not labeled:
        return TotalLoss(
            mask_loss=0.0,
            foreground_loss=0.0,
            consistency_loss=c_val,
            objectness_loss=0.0,
            total=weights.gamma * c_val,
            grad_masks=grad_masks.reshape(n, h, w),
            grad_scores=grad_scores,
            grad_foreground=grad_fg.reshape(h, w),
        )

    if match is None or foreground_gt is None or annotations is None:
        raise ValueError("labeled samples require annotations, a match result and foreground ground truth")

    annotations = list(annotations)
    m_val = 0.0
    if match.pairs:
        k = len(match.pairs)
        for pred_idx, gt_idx in match.pairs:
            p_flat = mask_stack[pred_idx]
            t_flat = annotations[gt_idx].data.astype(np.float64).ravel()
            b_val, b_grad, _ = _kernels.bce_grads(p_flat, t_flat, CLAMP_EPS)
            d_val, d_grad, _ = _kernels.dice_grads(p_flat, t_flat, DICE_SMOOTH)
            m_val += b_val + d_val
            grad_masks[pred_idx] += weights.alpha * (b_grad + d_grad) / k
        m_val /= k

    t_flat = foreground_gt.data.astype(np.float64).ravel()
    _check_same_shape(fg_flat, t_flat)
    fb_val, fb_grad, _ = _kernels.bce_grads(fg_flat, t_flat, CLAMP_EPS)
    fd_val, fd_grad, _ = _kernels.dice_grads(fg_flat, t_flat, DICE_SMOOTH)
    p_val = fb_val + fd_val
    grad_fg += weights.beta * (fb_grad + fd_grad)

    o_val, o_grad = objectness_loss(pred.scores, match.indicators)
    grad_scores = weights.omega * o_grad

    total = weights.alpha * m_val + weights.beta * p_val + weights.gamma * c_val + weights.omega * o_val
    return TotalLoss(
        mask_loss=m_val,
        foreground_loss=p_val,
        consistency_loss=c_val,
        objectness_loss=o_val,
        total=total,
        grad_masks=grad_masks.reshape(n, h, w),
        grad_scores=grad_scores,
        grad_foreground=grad_fg.reshape(h, w),
    )
