"""Deterministic synthetic scenes with dense instance ground truth.

Scenes are stacks of simple shapes rendered back-to-front; occluded pixels
belong to the front instance only, so the per-instance masks are mutually
disjoint and their union is exactly the rendered foreground.  Per-pixel
features are hand-crafted (shape-color channels, normalized coordinates and a
bias channel) so the linear prediction head can fit them.  Annotation dropout
emulates incomplete open-world labels; the labeled/unlabeled split feeds the
semi-supervised protocol.

Dataset file format ("owis-lab.dataset.v1"): newline-delimited JSON, manifest
record first, then one record per sample holding the shape parameters, the
column-major RLE of each (post-occlusion) instance mask, the visible index
subset, flags, and a SHA-256 checksum of the feature grid.  Features are
re-rendered from the masks on load and verified against the checksum, so
round trips are bit-exact without storing the dense grid.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .masks import BinaryMask, RleMask, rle_decode, rle_encode, union_foreground

DATASET_FORMAT = "owis-lab.dataset.v1"

KINDS = ("circle", "square", "triangle", "bar", "blob")
FEATURE_DIM = 8  # 5 color channels + 2 coordinates + bias

# Kind colors put most of their energy into a shared "object intensity"
# channel and only a weak kind-specific code (simplex vertices via the
# Helmert basis, pairwise correlation -1/4).  "Looks like an object" is then
# an easy linear direction while suppressing one kind against the rest needs
# several times more weight, which decoupled weight decay caps.
_SHARED_COLOR = 0.95
_helmert = np.zeros((len(KINDS) - 1, len(KINDS)))
for _i in range(1, len(KINDS)):
    _helmert[_i - 1, :_i] = 1.0
    _helmert[_i - 1, _i] = -float(_i)
    _helmert[_i - 1] /= math.sqrt(_i * (_i + 1))
_codes = (_helmert / np.linalg.norm(_helmert, axis=0)).T
KIND_COLORS = np.hstack(
    [np.full((len(KINDS), 1), _SHARED_COLOR), math.sqrt(1.0 - _SHARED_COLOR**2) * _codes]
)
KIND_COLORS.setflags(write=False)

# Stream tags keep the dropout / split draws independent of generation draws.
_DROPOUT_STREAM = 0xD0
_SPLIT_STREAM = 0x51

_MIN_SHAPE_PIXELS = 4
_MIN_VISIBLE_FRACTION = 0.4
_PLACEMENT_ATTEMPTS = 100


class DatasetFormatError(ValueError):
    """Raised for malformed dataset files, truncation, or checksum mismatches."""


@dataclass(frozen=True)
class SceneSpec:
    """Geometry of one synthetic scene family."""

    height: int = 64
    width: int = 64
    min_instances: int = 0
    max_instances: int = 6
    kinds: tuple = KINDS
    min_scale: float = 4.0
    max_scale: float = 12.0

    def __post_init__(self):
        if min(self.height, self.width) < 16:
            raise ValueError("image size must be at least 16 pixels per side")
        if not 0 <= self.min_instances <= self.max_instances <= 12:
            raise ValueError("instance counts must satisfy 0 <= min <= max <= 12")
        kinds = tuple(self.kinds)
        if not kinds or any(k not in KINDS for k in kinds):
            raise ValueError(f"kinds must be a nonempty subset of {KINDS}")
        if not 0 < self.min_scale <= self.max_scale:
            raise ValueError("scales must be positive with min <= max")
        if self.max_scale >= min(self.height, self.width) / 2:
            raise ValueError("max_scale too large for the canvas")
        object.__setattr__(self, "kinds", kinds)


@dataclass(frozen=True)
class DropoutPolicy:
    """Either keep each instance with probability ``keep_fraction`` or drop whole kinds."""

    keep_fraction: Optional[float] = None
    drop_kinds: Optional[tuple] = None

    def __post_init__(self):
        if (self.keep_fraction is None) == (self.drop_kinds is None):
            raise ValueError("set exactly one of keep_fraction / drop_kinds")
        if self.keep_fraction is not None and not 0.0 <= self.keep_fraction <= 1.0:
            raise ValueError("keep_fraction must lie in [0, 1]")
        if self.drop_kinds is not None:
            kinds = tuple(self.drop_kinds)
            if any(k not in KINDS for k in kinds):
                raise ValueError(f"drop_kinds must be a subset of {KINDS}")
            object.__setattr__(self, "drop_kinds", kinds)


@dataclass(frozen=True)
class DatasetManifest:
    """Everything needed to regenerate a dataset bit-identically."""

    seed: int
    scene: SceneSpec
    num_samples: int
    dropout: Optional[DropoutPolicy] = None
    labeled_fraction: float = 1.0
    split_seed: int = 0
    sparse_annotations: bool = False

    def __post_init__(self):
        if self.seed < 0 or self.split_seed < 0:
            raise ValueError("seeds must be nonnegative")
        if self.num_samples < 1:
            raise ValueError("num_samples must be positive")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class ShapeInstance:
    """One rendered shape; ``mask`` is the visible (post-occlusion) region."""

    kind: str
    center: tuple
    scale: float
    orientation: float
    mask: BinaryMask

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))


@dataclass(frozen=True, eq=False)
class Sample:
    """One synthetic image with its annotations and annotation-dropout view."""

    seed: int
    features: np.ndarray
    full_annotations: tuple
    visible_annotations: tuple
    labeled: bool = True
    requested_instances: int = 0
    cutout_rect: Optional[tuple] = None

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if feats.ndim != 3 or feats.shape[2] != FEATURE_DIM:
            raise ValueError(f"features must be (H, W, {FEATURE_DIM})")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "full_annotations", tuple(self.full_annotations))
        visible = tuple(int(i) for i in self.visible_annotations)
        n = len(self.full_annotations)
        if list(visible) != sorted(set(visible)) or any(not 0 <= i < n for i in visible):
            raise ValueError("visible_annotations must be a sorted subset of annotation indices")
        object.__setattr__(self, "visible_annotations", visible)

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def visible_masks(self):
        """Masks the trainer may look at: the post-dropout view (empty if unlabeled)."""
        if not self.labeled:
            return []
        return [self.full_annotations[i].mask for i in self.visible_annotations]

    def full_masks(self):
        """Dense oracle masks, evaluation only."""
        return [inst.mask for inst in self.full_annotations]


@dataclass(frozen=True)
class Dataset:
    manifest: Optional[DatasetManifest]
    samples: tuple

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    def __len__(self) -> int:
        return len(self.samples)


def _connected(mask: np.ndarray) -> bool:
    """4-connectivity check on a boolean grid."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return False
    seen = np.zeros_like(mask, dtype=bool)
    queue = deque([(int(ys[0]), int(xs[0]))])
    seen[ys[0], xs[0]] = True
    count = 0
    h, w = mask.shape
    while queue:
        y, x = queue.popleft()
        count += 1
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                seen[ny, nx] = True
                queue.append((ny, nx))
    return count == ys.size


def _pixel_grid(height: int, width: int):
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    return ys, xs


def _rasterize(kind: str, cy: float, cx: float, scale: float, theta: float, height: int, width: int, rng) -> np.ndarray:
    ys, xs = _pixel_grid(height, width)
    dy = ys - cy
    dx = xs - cx
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    u = cos_t * dx + sin_t * dy
    v = -sin_t * dx + cos_t * dy
    if kind == "circle":
        return dx * dx + dy * dy <= scale * scale
    if kind == "square":
        half = scale / math.sqrt(2.0)
        return np.maximum(np.abs(u), np.abs(v)) <= half
    if kind == "triangle":
        # equilateral triangle with circumradius `scale`; the half-plane test is
        # winding-agnostic (image coordinates flip the cross-product sign)
        verts = [
            (cy + scale * math.sin(theta + k * 2.0 * math.pi / 3.0),
             cx + scale * math.cos(theta + k * 2.0 * math.pi / 3.0))
            for k in range(3)
        ]
        non_neg = np.ones((height, width), dtype=bool)
        non_pos = np.ones((height, width), dtype=bool)
        for k in range(3):
            ay, ax = verts[k]
            by, bx = verts[(k + 1) % 3]
            cross = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
            non_neg &= cross >= 0
            non_pos &= cross <= 0
        return non_neg | non_pos
    if kind == "bar":
        return (np.abs(u) <= scale) & (np.abs(v) <= scale / 3.5)
    if kind == "blob":
        mask = dx * dx + dy * dy <= (0.55 * scale) ** 2
        for _ in range(3):
            ang = rng.uniform(0.0, 2.0 * math.pi)
            dist = rng.uniform(0.0, 0.45 * scale)
            radius = rng.uniform(0.45, 0.7) * scale
            oy, ox = cy + dist * math.sin(ang), cx + dist * math.cos(ang)
            mask |= (xs - ox) ** 2 + (ys - oy) ** 2 <= radius * radius
        return mask
    raise ValueError(f"unknown shape kind {kind!r}")


def render_features(instances: Sequence[ShapeInstance], height: int, width: int, cutout_rect=None) -> np.ndarray:
    """Feature grid from the disjoint visible masks: colors + coordinates + bias."""
    feats = np.zeros((height, width, FEATURE_DIM))
    for inst in instances:
        idx = KINDS.index(inst.kind)
        region = inst.mask.data.astype(bool)
        feats[region, :5] = KIND_COLORS[idx]
    ys, xs = _pixel_grid(height, width)
    feats[:, :, 5] = np.broadcast_to(xs / width * 2.0 - 1.0, (height, width))
    feats[:, :, 6] = np.broadcast_to(ys / height * 2.0 - 1.0, (height, width))
    feats[:, :, 7] = 1.0
    if cutout_rect is not None:
        y0, x0, ch, cw = cutout_rect
        feats[y0 : y0 + ch, x0 : x0 + cw, :] = 0.0
    return feats


def generate_scene(rng_seed: int, spec: SceneSpec) -> Sample:
    """Render one scene; a pure function of (seed, spec).

    Shapes are placed back-to-front with up to 100 attempts each; a placement
    is rejected when it would erase or disconnect an earlier instance, so a
    scene may end up with fewer shapes than requested (recorded on the
    sample).
    """
    rng = np.random.default_rng(rng_seed)
    h, w = spec.height, spec.width
    n_target = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    params = []
    originals = []
    visibles = []
    for _ in range(n_target):
        for _attempt in range(_PLACEMENT_ATTEMPTS):
            kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
            scale = float(rng.uniform(spec.min_scale, spec.max_scale))
            cy = float(rng.uniform(scale, h - scale))
            cx = float(rng.uniform(scale, w - scale))
            theta = float(rng.uniform(0.0, 2.0 * math.pi))
            full = _rasterize(kind, cy, cx, scale, theta, h, w, rng)
            if full.sum() < _MIN_SHAPE_PIXELS or not _connected(full):
                continue
            trimmed = [v & ~full for v in visibles]
            if any(
                t.sum() < max(_MIN_SHAPE_PIXELS, _MIN_VISIBLE_FRACTION * o.sum()) or not _connected(t)
                for t, o in zip(trimmed, originals)
            ):
                continue
            params.append((kind, cy, cx, scale, theta))
            originals.append(full)
            visibles.append(full)
            visibles[:-1] = trimmed
            break
    instances = tuple(
        ShapeInstance(kind, (cy, cx), scale, theta, BinaryMask(vis.astype(np.uint8)))
        for (kind, cy, cx, scale, theta), vis in zip(params, visibles)
    )
    features = render_features(instances, h, w)
    return Sample(
        seed=rng_seed,
        features=features,
        full_annotations=instances,
        visible_annotations=tuple(range(len(instances))),
        labeled=True,
        requested_instances=n_target,
    )


def drop_annotations(sample: Sample, policy: DropoutPolicy) -> Sample:
    """Reduce the visible annotation view; the full annotations stay intact."""
    if policy.drop_kinds is not None:
        visible = tuple(
            i for i in range(len(sample.full_annotations))
            if sample.full_annotations[i].kind not in policy.drop_kinds
        )
    else:
        rng = np.random.default_rng([sample.seed, _DROPOUT_STREAM])
        draws = rng.random(len(sample.full_annotations))
        visible = tuple(i for i in range(len(sample.full_annotations)) if draws[i] < policy.keep_fraction)
    return dataclasses.replace(sample, visible_annotations=visible)


def split_labeled_unlabeled(dataset: Dataset, labeled_fraction: float, seed: int):
    """Disjoint labeled/unlabeled partition; unlabeled samples hide all annotations."""
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError("labeled_fraction must lie in (0, 1]")
    n = len(dataset.samples)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    n_labeled = int(round(labeled_fraction * n))
    perm = np.random.default_rng([seed, _SPLIT_STREAM]).permutation(n)
    labeled_ids = set(int(i) for i in perm[:n_labeled])
    labeled = [dataset.samples[i] for i in range(n) if i in labeled_ids]
    unlabeled = [
        dataclasses.replace(dataset.samples[i], labeled=False, visible_annotations=())
        for i in range(n)
        if i not in labeled_ids
    ]
    return Dataset(dataset.manifest, tuple(labeled)), Dataset(dataset.manifest, tuple(unlabeled))


def cutout(sample: Sample, rng) -> Sample:
    """Zero a random feature rectangle with sides in [size/8, size/3]; labels are not cut."""
    h, w = sample.height, sample.width
    if min(h, w) < 8:
        raise ValueError("cutout requires at least an 8x8 image")
    ch = int(rng.integers(math.ceil(h / 8), math.floor(h / 3) + 1))
    cw = int(rng.integers(math.ceil(w / 8), math.floor(w / 3) + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    feats = sample.features.copy()
    feats[y0 : y0 + ch, x0 : x0 + cw, :] = 0.0
    return dataclasses.replace(sample, features=feats, cutout_rect=(y0, x0, ch, cw))


def generate_dataset(manifest: DatasetManifest) -> Dataset:
    """Generate all samples (per-sample seed = dataset seed XOR index), then
    apply the manifest's dropout policy and labeled/unlabeled split."""
    samples = [generate_scene(manifest.seed ^ i, manifest.scene) for i in range(manifest.num_samples)]
    if manifest.dropout is not None:
        samples = [drop_annotations(s, manifest.dropout) for s in samples]
    if manifest.labeled_fraction < 1.0:
        ds = Dataset(manifest, tuple(samples))
        labeled, unlabeled = split_labeled_unlabeled(ds, manifest.labeled_fraction, manifest.split_seed)
        by_seed = {s.seed: s for s in labeled.samples}
        by_seed.update({s.seed: s for s in unlabeled.samples})
        samples = [by_seed[s.seed] for s in samples]
    return Dataset(manifest, tuple(samples))


# --- serialization ---------------------------------------------------------


def _policy_to_dict(policy: Optional[DropoutPolicy]):
    if policy is None:
        return None
    if policy.keep_fraction is not None:
        return {"keep_fraction": policy.keep_fraction}
    return {"drop_kinds": list(policy.drop_kinds)}


def _policy_from_dict(obj) -> Optional[DropoutPolicy]:
    if obj is None:
        return None
    if "keep_fraction" in obj:
        return DropoutPolicy(keep_fraction=obj["keep_fraction"])
    return DropoutPolicy(drop_kinds=tuple(obj["drop_kinds"]))


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "seed": manifest.seed,
        "scene": dataclasses.asdict(manifest.scene) | {"kinds": list(manifest.scene.kinds)},
        "num_samples": manifest.num_samples,
        "dropout": _policy_to_dict(manifest.dropout),
        "labeled_fraction": manifest.labeled_fraction,
        "split_seed": manifest.split_seed,
        "sparse_annotations": manifest.sparse_annotations,
    }


def manifest_from_dict(obj: dict) -> DatasetManifest:
    scene = dict(obj["scene"])
    scene["kinds"] = tuple(scene["kinds"])
    return DatasetManifest(
        seed=obj["seed"],
        scene=SceneSpec(**scene),
        num_samples=obj["num_samples"],
        dropout=_policy_from_dict(obj.get("dropout")),
        labeled_fraction=obj.get("labeled_fraction", 1.0),
        split_seed=obj.get("split_seed", 0),
        sparse_annotations=obj.get("sparse_annotations", False),
    )


def _features_checksum(features: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(features).tobytes()).hexdigest()


def _sample_record(sample: Sample) -> dict:
    return {
        "seed": sample.seed,
        "height": sample.height,
        "width": sample.width,
        "labeled": sample.labeled,
        "requested_instances": sample.requested_instances,
        "visible": list(sample.visible_annotations),
        "cutout": list(sample.cutout_rect) if sample.cutout_rect else None,
        "instances": [
            {
                "kind": inst.kind,
                "center": [inst.center[0], inst.center[1]],
                "scale": inst.scale,
                "orientation": inst.orientation,
                "rle": list(rle_encode(inst.mask).runs),
            }
            for inst in sample.full_annotations
        ],
        "features_sha256": _features_checksum(sample.features),
    }


def _sample_from_record(rec: dict) -> Sample:
    h, w = rec["height"], rec["width"]
    instances = tuple(
        ShapeInstance(
            kind=obj["kind"],
            center=(obj["center"][0], obj["center"][1]),
            scale=obj["scale"],
            orientation=obj["orientation"],
            mask=rle_decode(RleMask(h, w, tuple(obj["rle"]))),
        )
        for obj in rec["instances"]
    )
    cut = tuple(rec["cutout"]) if rec.get("cutout") else None
    features = render_features(instances, h, w, cutout_rect=cut)
    if _features_checksum(features) != rec["features_sha256"]:
        raise DatasetFormatError("feature checksum mismatch")
    return Sample(
        seed=rec["seed"],
        features=features,
        full_annotations=instances,
        visible_annotations=tuple(rec["visible"]),
        labeled=rec["labeled"],
        requested_instances=rec["requested_instances"],
        cutout_rect=cut,
    )


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "format": DATASET_FORMAT,
            "num_samples": len(dataset.samples),
            "manifest": manifest_to_dict(dataset.manifest) if dataset.manifest else None,
        }
        fh.write(json.dumps(header) + "\n")
        for sample in dataset.samples:
            fh.write(json.dumps(_sample_record(sample)) + "\n")


def load_dataset(path) -> Dataset:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read dataset file: {exc}") from exc
    if not lines:
        raise DatasetFormatError("empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"malformed header: {exc}") from exc
    if header.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(f"unsupported dataset format {header.get('format')!r}")
    expected = header["num_samples"]
    body = lines[1:]
    if len(body) != expected:
        raise DatasetFormatError(f"truncated dataset file: {len(body)} of {expected} samples")
    manifest = manifest_from_dict(header["manifest"]) if header.get("manifest") else None
    samples = []
    for i, line in enumerate(body):
        try:
            rec = json.loads(line)
            samples.append(_sample_from_record(rec))
        except DatasetFormatError:
            raise
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"malformed sample record {i}: {exc}") from exc
    return Dataset(manifest, tuple(samples))


def samples_equal(a: Sample, b: Sample) -> bool:
    """Field-by-field equality (arrays compared exactly)."""
    if (
        a.seed != b.seed
        or a.labeled != b.labeled
        or a.requested_instances != b.requested_instances
        or a.visible_annotations != b.visible_annotations
        or a.cutout_rect != b.cutout_rect
        or a.features.shape != b.features.shape
        or not np.array_equal(a.features, b.features)
        or len(a.full_annotations) != len(b.full_annotations)
    ):
        return False
    for x, y in zip(a.full_annotations, b.full_annotations):
        if (
            x.kind != y.kind
            or x.center != y.center
            or x.scale != y.scale
            or x.orientation != y.orientation
            or x.mask != y.mask
        ):
            return False
    return True


# handy for oracle checks: the rendered foreground is where any color is set
def rendered_foreground(sample: Sample) -> BinaryMask:
    fg = (np.abs(sample.features[:, :, :5]).sum(axis=2) > 0).astype(np.uint8)
    return BinaryMask(fg)


def foreground_truth(sample: Sample, visible_only: bool = True) -> BinaryMask:
    masks = sample.visible_masks() if visible_only else sample.full_masks()
    return union_foreground(masks, height=sample.height, width=sample.width)
