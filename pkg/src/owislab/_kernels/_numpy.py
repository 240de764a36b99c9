"""Numpy fallback for the hot per-pixel kernels.

Semantics here are the reference; the compiled extension (``_ext.pyx``)
implements the same contracts with fused loops.  All arrays are float64 and
C-contiguous; reductions over pixels are means unless noted.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_grads(pred, target, eps):
    """Mean binary cross-entropy with gradients w.r.t. both arguments.

    ``pred`` is clamped into [eps, 1-eps] before the logs; the pred-side
    gradient is the derivative of the clamped expression, i.e. exactly zero
    where the clamp is active.  Returns (value, dvalue/dpred, dvalue/dtarget).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n = pred.size
    p = np.clip(pred, eps, 1.0 - eps)
    value = -float(np.sum(target * np.log(p) + (1.0 - target) * np.log1p(-p))) / n
    interior = (pred > eps) & (pred < 1.0 - eps)
    dpred = np.where(interior, (p - target) / (p * (1.0 - p)), 0.0) / n
    dtarget = -(np.log(p) - np.log1p(-p)) / n
    return value, dpred, dtarget


def dice_grads(pred, target, smooth):
    """Soft dice loss 1 - (2*sum(p*t)+s)/(sum(p)+sum(t)+s) with exact grads."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    inter = float(np.sum(pred * target))
    denom = float(np.sum(pred) + np.sum(target)) + smooth
    num = 2.0 * inter + smooth
    value = 1.0 - num / denom
    dpred = -(2.0 * target * denom - num) / (denom * denom)
    dtarget = -(2.0 * pred * denom - num) / (denom * denom)
    return value, dpred, dtarget


def bce_dice_values(preds, targets, eps, smooth):
    """Pairwise (BCE, dice) loss values between rows of two mask stacks.

    preds: (N, P), targets: (K, P).  Returns two (N, K) matrices.  This is
    the matching-cost hot path, so no gradients are computed.
    """
    preds = np.ascontiguousarray(preds, dtype=np.float64)
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    n_pix = preds.shape[1]
    p = np.clip(preds, eps, 1.0 - eps)
    log_p = np.log(p)
    log_1p = np.log1p(-p)
    # BCE(n,k) = -(log_p[n] . t[k] + log_1p[n] . (1-t[k])) / P
    bce = -(log_p @ targets.T + log_1p @ (1.0 - targets).T) / n_pix
    inter = preds @ targets.T
    denom = preds.sum(axis=1)[:, None] + targets.sum(axis=1)[None, :] + smooth
    dice = 1.0 - (2.0 * inter + smooth) / denom
    return bce, dice


def soft_union(masks, use_logits, eps):
    """Pixelwise soft union of a mask stack and its per-mask derivative.

    masks: (N, P).  In the default mode the union is sigmoid(sum of mask
    confidences); in logit mode the confidences are mapped back through the
    logit (with clamping) before summation.  Returns (ghat (P,), dghat (N, P))
    where dghat[j, i] = d ghat_i / d masks[j, i].
    """
    masks = np.asarray(masks, dtype=np.float64)
    if use_logits:
        m = np.clip(masks, eps, 1.0 - eps)
        z = np.log(m) - np.log1p(-m)
        ghat = sigmoid(z.sum(axis=0))
        interior = (masks > eps) & (masks < 1.0 - eps)
        dghat = np.where(interior, (ghat * (1.0 - ghat))[None, :] / (m * (1.0 - m)), 0.0)
    else:
        ghat = sigmoid(masks.sum(axis=0))
        dghat = np.broadcast_to(ghat * (1.0 - ghat), masks.shape).copy()
    return ghat, dghat


def iou_pairs(a, b):
    """Pairwise IoU between two stacks of flat binary masks.

    a: (A, P) uint8/bool, b: (B, P).  Empty-vs-empty pairs get IoU 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter = a @ b.T
    union = a.sum(axis=1)[:, None] + b.sum(axis=1)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out
