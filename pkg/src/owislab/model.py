"""Linear-logistic three-branch head over per-pixel features.

Each of the N query slots owns a mask vector (per-pixel logistic of the dot
product with the feature) and an objectness vector (logistic against the mean
feature); a single foreground vector produces the dense foreground map.  The
foreground output is used only to regularize training: detection output at
inference is masks + scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import sigmoid
from .masks import SoftMask

# Query-slot count used by the reference setup; experiment configs shrink it.
PAPER_QUERY_COUNT = 100


def _frozen(arr, shape) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out.shape != shape:
        raise ValueError(f"expected parameter block of shape {shape}, got {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ToyModel:
    """Parameters of the three branches.

    Flat layout (used by the optimizer, checkpoints and the EMA teacher):
    query_vectors row-major (N*d), then objectness_vectors row-major (N*d),
    then foreground_vector (d), total (2N+1)*d.
    """

    query_vectors: np.ndarray
    objectness_vectors: np.ndarray
    foreground_vector: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.query_vectors, dtype=np.float64)
        if q.ndim != 2:
            raise ValueError("query_vectors must be (N, d)")
        n, d = q.shape
        object.__setattr__(self, "query_vectors", _frozen(q, (n, d)))
        object.__setattr__(self, "objectness_vectors", _frozen(self.objectness_vectors, (n, d)))
        object.__setattr__(self, "foreground_vector", _frozen(self.foreground_vector, (d,)))

    @property
    def num_queries(self) -> int:
        return self.query_vectors.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.query_vectors.shape[1]

    @property
    def num_parameters(self) -> int:
        return (2 * self.num_queries + 1) * self.feat_dim

    def to_flat(self) -> np.ndarray:
        return np.concatenate(
            [self.query_vectors.ravel(), self.objectness_vectors.ravel(), self.foreground_vector]
        )

    @classmethod
    def from_flat(cls, flat, num_queries: int, feat_dim: int) -> "ToyModel":
        flat = np.asarray(flat, dtype=np.float64)
        expected = (2 * num_queries + 1) * feat_dim
        if flat.shape != (expected,):
            raise ValueError(f"flat parameters must have length {expected}, got {flat.shape}")
        nd = num_queries * feat_dim
        return cls(
            flat[:nd].reshape(num_queries, feat_dim),
            flat[nd : 2 * nd].reshape(num_queries, feat_dim),
            flat[2 * nd :].copy(),
        )

    @classmethod
    def zeros(cls, num_queries: int, feat_dim: int) -> "ToyModel":
        return cls.from_flat(np.zeros((2 * num_queries + 1) * feat_dim), num_queries, feat_dim)

    @classmethod
    def init_random(cls, num_queries: int, feat_dim: int, seed: int, scale: float = 0.01) -> "ToyModel":
        """Small random init; breaks the symmetry between query slots."""
        rng = np.random.default_rng(seed)
        flat = rng.normal(0.0, scale, size=(2 * num_queries + 1) * feat_dim)
        return cls.from_flat(flat, num_queries, feat_dim)


@dataclass(frozen=True)
class PredictionSet:
    """The three branch outputs for one image.

    masks: (N, H, W) per-pixel confidences, scores: (N,) objectness in [0,1],
    foreground: (H, W) dense foreground confidence.
    """

    masks: np.ndarray
    scores: np.ndarray
    foreground: np.ndarray

    def __post_init__(self):
        m = np.ascontiguousarray(self.masks, dtype=np.float64)
        s = np.ascontiguousarray(self.scores, dtype=np.float64)
        f = np.ascontiguousarray(self.foreground, dtype=np.float64)
        if m.ndim != 3 or s.shape != (m.shape[0],) or f.shape != m.shape[1:]:
            raise ValueError(
                f"inconsistent prediction shapes: masks {m.shape}, scores {s.shape}, foreground {f.shape}"
            )
        for arr, name in ((m, "masks"), (s, "scores"), (f, "foreground")):
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name} values must lie in [0, 1]")
            arr.setflags(write=False)
        object.__setattr__(self, "masks", m)
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "foreground", f)

    @property
    def num_queries(self) -> int:
        return self.masks.shape[0]

    def mask(self, j: int) -> SoftMask:
        return SoftMask(self.masks[j])

    def foreground_mask(self) -> SoftMask:
        return SoftMask(self.foreground)


def forward(model: ToyModel, sample) -> PredictionSet:
    """Run the three branches on a sample (or a raw (H, W, d) feature grid)."""
    features = getattr(sample, "features", sample)
    features = np.asarray(features, dtype=np.float64)
    h, w, d = features.shape
    if d != model.feat_dim:
        raise ValueError(f"feature dim {d} does not match model dim {model.feat_dim}")
    flat = features.reshape(h * w, d)
    masks = sigmoid(flat @ model.query_vectors.T).T.reshape(model.num_queries, h, w)
    fbar = flat.mean(axis=0)
    scores = sigmoid(model.objectness_vectors @ fbar)
    fg = sigmoid(flat @ model.foreground_vector).reshape(h, w)
    return PredictionSet(masks, scores, fg)
