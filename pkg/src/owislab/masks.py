"""Dense and run-length mask representations plus the pixelwise primitives.

Binary masks carry per-pixel {0,1} ground truth, soft masks carry per-pixel
probabilities.  Everything is immutable after construction and all operations
are pure, so masks can be shared freely across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

SOFT_UNION_SIGMOID_OF_CONFIDENCES = "sigmoid_of_confidences"
SOFT_UNION_SIGMOID_OF_LOGITS = "sigmoid_of_logits"
SOFT_UNION_MODES = (SOFT_UNION_SIGMOID_OF_CONFIDENCES, SOFT_UNION_SIGMOID_OF_LOGITS)

# Clamp applied to confidences before logs (shared with the losses).
CLAMP_EPS = 1e-7


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """A height x width grid of {0,1} pixels, row-major."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.uint8)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"binary mask must be 2-D with positive dims, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("binary mask entries must be exactly 0 or 1")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.data.shape == other.data.shape and bool((self.data == other.data).all())


@dataclass(frozen=True, eq=False)
class SoftMask:
    """A height x width grid of per-pixel confidences in [0, 1], row-major."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"soft mask must be 2-D with positive dims, got shape {arr.shape}")
        if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("soft mask entries must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SoftMask):
            return NotImplemented
        return self.data.shape == other.data.shape and bool((self.data == other.data).all())


@dataclass(frozen=True)
class RleMask:
    """Run-length encoding in column-major pixel order.

    ``runs`` alternates run lengths of 0s and 1s, always starting with a run
    of 0s (which may be zero-length when the first pixel is 1).
    """

    height: int
    width: int
    runs: tuple = field(default=())

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("rle dimensions must be positive")
        runs = tuple(int(r) for r in self.runs)
        if any(r < 0 for r in runs):
            raise ValueError("rle run lengths must be nonnegative")
        if sum(runs) != self.height * self.width:
            raise ValueError(
                f"rle runs sum to {sum(runs)}, expected {self.height * self.width}"
            )
        object.__setattr__(self, "runs", runs)


def _require_same_shape(shapes) -> tuple:
    shapes = list(shapes)
    first = shapes[0]
    for s in shapes[1:]:
        if s != first:
            raise ValueError(f"mask dimension mismatch: {s} vs {first}")
    return first


def union_foreground(annotations, *, height=None, width=None) -> BinaryMask:
    """Pixelwise OR of instance masks: the foreground ground truth.

    An empty annotation list yields an all-zero mask of the dimensions given
    by the caller via ``height``/``width``.
    """
    annotations = list(annotations)
    if not annotations:
        if height is None or width is None:
            raise ValueError("empty annotation list requires explicit height and width")
        return BinaryMask(np.zeros((height, width), dtype=np.uint8))
    _require_same_shape(m.data.shape for m in annotations)
    out = np.zeros_like(annotations[0].data)
    for m in annotations:
        np.bitwise_or(out, m.data, out=out)
    return BinaryMask(out)


def soft_union_estimate(masks, mode: str = SOFT_UNION_SIGMOID_OF_CONFIDENCES) -> SoftMask:
    """Differentiable foreground estimate from predicted instance masks.

    The default mode applies the logistic function to the pixelwise sum of
    mask confidences, which floors the estimate at 0.5 wherever all masks are
    zero.  The alternative ``sigmoid_of_logits`` mode sums the masks'
    (clamped) logits instead, so the estimate can reach both 0 and 1.
    """
    masks = list(masks)
    if not masks:
        raise ValueError("soft union of an empty mask list is undefined")
    if mode not in SOFT_UNION_MODES:
        raise ValueError(f"unknown soft union mode {mode!r}")
    shape = _require_same_shape(m.data.shape for m in masks)
    stack = np.stack([m.data.ravel() for m in masks])
    ghat, _ = _kernels.soft_union(stack, mode == SOFT_UNION_SIGMOID_OF_LOGITS, CLAMP_EPS)
    return SoftMask(ghat.reshape(shape))


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union of two binary masks; 0 when both are empty."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mask dimension mismatch: {a.data.shape} vs {b.data.shape}")
    inter = int(np.sum(a.data & b.data))
    union = int(np.sum(a.data | b.data))
    if union == 0:
        return 0.0
    return inter / union


def binarize(soft: SoftMask, threshold: float) -> BinaryMask:
    """Harden a soft mask: pixel is 1 iff its confidence strictly exceeds threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return BinaryMask((soft.data > threshold).astype(np.uint8))


def rle_encode(mask: BinaryMask) -> RleMask:
    """Encode a binary mask as alternating column-major run lengths."""
    flat = mask.data.ravel(order="F")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return RleMask(mask.height, mask.width, tuple(runs))


def rle_decode(rle: RleMask) -> BinaryMask:
    """Decode run lengths back to a dense binary mask (exact inverse of encode)."""
    flat = np.zeros(rle.height * rle.width, dtype=np.uint8)
    pos = 0
    value = 0
    for run in rle.runs:
        if value:
            flat[pos : pos + run] = 1
        pos += run
        value ^= 1
    return BinaryMask(flat.reshape((rle.height, rle.width), order="F"))
