"""Shared domain types, validation and checkpoint serialization.

Everything downstream (data generation, model, heatmaps, oracle, loop,
service) consumes these types. Arrays are plain numpy; instances are
immutable after construction except SamplePool, which is mutated only by
the orchestrator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

SCHEMA_VERSION = "segxal/1"

# Cityscapes convention: 255 marks pixels excluded from loss and metrics.
IGNORE = 255

IMAGE_SOURCES = ("synthetic", "cityscapes", "external")
HEATMAP_KINDS = ("entropy", "gradcam", "proximity", "prox_gradcam", "eem")
DEPTH_PROVIDERS = ("file_midas", "file_dinov2", "synthetic")
POOL_TAGS = ("labeled", "unlabeled", "candidate")

PROB_SUM_TOL = 1e-5


class SegxalError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(SegxalError):
    pass


class PoolCorruptError(SegxalError):
    """Raised when a serialized pool/state document cannot be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Image:
    """A normalized 3-channel image, values in [0, 1]."""

    pixels: np.ndarray  # (H, W, 3) float32
    id: str
    source: str = "synthetic"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel integer class labels, IGNORE (255) excluded everywhere."""

    labels: np.ndarray  # (H, W) int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def valid_mask(self) -> np.ndarray:
        return self.labels != IGNORE


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class probabilities P(c | x), shape (C, H, W).

    Stored at float64 so entropy at exactly uniform distributions lands on
    log2(C) to full precision.
    """

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape[1], self.probs.shape[2]

    def argmax(self) -> np.ndarray:
        return np.argmax(self.probs, axis=0)


@dataclass(frozen=True)
class HeatMap:
    """Normalized scalar field over pixels, values in [0, 1].

    ``flags`` records degenerate paths (e.g. an all-zero saliency map or a
    proximity fallback) without widening the return type of producers.
    """

    values: np.ndarray  # (H, W) float32
    kind: str
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float32))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class DepthMap:
    """Relative inverse depth: larger value = nearer, normalized to [0, 1]."""

    depth: np.ndarray  # (H, W) float32 nearness
    provider: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "depth", np.asarray(self.depth, dtype=np.float32))

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True)
class Sample:
    """An image with optional ground truth, depth and cached prediction."""

    image: Image
    gt: LabelMask | None = None
    depth: DepthMap | None = None
    pool_tag: str = "unlabeled"
    probs: ProbMap | None = None

    @property
    def id(self) -> str:
        return self.image.id

    def with_tag(self, tag: str) -> "Sample":
        return replace(self, pool_tag=tag)

    def with_gt(self, gt: LabelMask) -> "Sample":
        return replace(self, gt=gt)


@dataclass
class SamplePool:
    """Membership of sample ids in the labeled / unlabeled / candidate pools."""

    labeled: set[str] = field(default_factory=set)
    unlabeled: set[str] = field(default_factory=set)
    candidate: set[str] = field(default_factory=set)

    def all_ids(self) -> set[str]:
        return self.labeled | self.unlabeled | self.candidate

    def audit(self) -> None:
        """Raise if the three pools are not pairwise disjoint."""
        overlaps = (
            (self.labeled & self.unlabeled)
            | (self.labeled & self.candidate)
            | (self.unlabeled & self.candidate)
        )
        if overlaps:
            raise SegxalError(f"pool disjointness violated for ids {sorted(overlaps)[:5]}")

    def __eq__(self, other):
        if not isinstance(other, SamplePool):
            return NotImplemented
        return (
            self.labeled == other.labeled
            and self.unlabeled == other.unlabeled
            and self.candidate == other.candidate
        )


@dataclass(frozen=True)
class ALConfig:
    """Knobs of the active-learning loop.

    Defaults: 10% initial labels, 5% queried per cycle over 5 cycles,
    equal fusion weights, acceptance threshold 0.85, median depth quantile.
    ``candidate_pool_factor`` scales the randomly drawn scoring subset
    relative to the per-cycle query size; the top-ranked samples within it
    are the ones actually sent to the oracle.
    """

    initial_label_fraction: float = 0.10
    query_fraction_per_cycle: float = 0.05
    num_cycles: int = 5
    budget_n: int = 0  # 0 = no explicit budget, stop on cycles/exhaustion
    fusion_alpha: float = 0.5
    fusion_beta: float = 0.5
    dice_threshold_theta: float = 0.85
    depth_quantile_tau: float = 0.5
    seed: int = 0
    candidate_pool_factor: int = 3
    prompt_percentile: float = 80.0
    prompt_max_regions: int = 5
    prompt_min_px: int = 16
    min_area_fraction: float = 0.01
    z_mode: str = "positive_grad_sum"
    hard_proximity: bool = False
    invert_selection: bool = False

    def __post_init__(self):
        for name in ("initial_label_fraction", "query_fraction_per_cycle",
                     "dice_threshold_theta", "depth_quantile_tau"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if self.fusion_alpha + self.fusion_beta <= 0:
            raise ValueError("fusion_alpha + fusion_beta must be positive")
        if self.num_cycles < 1:
            raise ValueError("num_cycles must be >= 1")
        if self.z_mode not in ("positive_grad_sum", "spatial_count"):
            raise ValueError(f"unknown z_mode {self.z_mode!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ALConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def validate_sample(sample: Sample) -> list[str]:
    """Check every type invariant; return one description per violation."""
    out: list[str] = []
    px = sample.image.pixels
    if px.ndim != 3 or px.shape[2] != 3:
        out.append(f"image-shape: expected (H, W, 3), got {px.shape}")
        return out
    h, w = px.shape[:2]
    if h < 16 or w < 16:
        out.append(f"image-too-small: {h}x{w}, minimum 16x16")
    if not np.all(np.isfinite(px)):
        out.append("image-nonfinite: pixels contain NaN or Inf")
    elif px.min() < 0.0 or px.max() > 1.0:
        out.append(f"image-range: values in [{px.min():.4g}, {px.max():.4g}], expected [0, 1]")
    if sample.pool_tag not in POOL_TAGS:
        out.append(f"unknown-pool-tag: {sample.pool_tag!r}")
    if sample.pool_tag == "labeled" and sample.gt is None:
        out.append("labeled-without-gt: sample tagged labeled but gt is absent")
    if sample.gt is not None:
        gt = sample.gt
        if gt.shape != (h, w):
            out.append(f"gt-shape-mismatch: gt {gt.shape} vs image {(h, w)}")
        bad = gt.labels[(gt.labels != IGNORE) & ((gt.labels < 0) | (gt.labels >= gt.num_classes))]
        if bad.size:
            out.append(f"gt-label-range: {bad.size} pixels outside [0, {gt.num_classes - 1}] + ignore")
    if sample.depth is not None:
        d = sample.depth.depth
        if d.shape != (h, w):
            out.append(f"depth-shape-mismatch: depth {d.shape} vs image {(h, w)}")
        if not np.all(np.isfinite(d)):
            out.append("depth-nonfinite: depth contains NaN or Inf")
        elif d.min() < 0.0 or d.max() > 1.0:
            out.append(f"depth-range: values in [{d.min():.4g}, {d.max():.4g}], expected [0, 1]")
    if sample.probs is not None:
        out.extend(validate_probmap(sample.probs, expect_shape=(h, w)))
    return out


def validate_probmap(pm: ProbMap, expect_shape: tuple[int, int] | None = None) -> list[str]:
    out: list[str] = []
    p = pm.probs
    if p.ndim != 3:
        return [f"probmap-shape: expected (C, H, W), got {p.shape}"]
    if expect_shape is not None and p.shape[1:] != expect_shape:
        out.append(f"probmap-shape-mismatch: {p.shape[1:]} vs image {expect_shape}")
    if not np.all(np.isfinite(p)):
        out.append("probmap-nonfinite")
        return out
    if p.min() < 0.0 or p.max() > 1.0:
        out.append(f"probmap-range: values in [{p.min():.4g}, {p.max():.4g}]")
    sums = p.sum(axis=0)
    err = np.abs(sums - 1.0)
    if err.max() >= PROB_SUM_TOL:
        i, j = np.unravel_index(int(np.argmax(err)), sums.shape)
        out.append(f"probmap-sum: pixel ({i}, {j}) sums to {sums[i, j]:.6f}, expected 1")
    return out


def validate_heatmap(hm: HeatMap) -> list[str]:
    out: list[str] = []
    v = hm.values
    if hm.kind not in HEATMAP_KINDS:
        out.append(f"heatmap-kind: {hm.kind!r}")
    if not np.all(np.isfinite(v)):
        out.append("heatmap-nonfinite")
    elif v.size and (v.min() < 0.0 or v.max() > 1.0):
        out.append(f"heatmap-range: [{v.min():.4g}, {v.max():.4g}]")
    return out


def serialize_pool(pool: SamplePool) -> bytes:
    pool.audit()
    doc = {
        "schema": SCHEMA_VERSION,
        "labeled": sorted(pool.labeled),
        "unlabeled": sorted(pool.unlabeled),
        "candidate": sorted(pool.candidate),
    }
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def deserialize_pool(data: bytes) -> SamplePool:
    try:
        doc = json.loads(data.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise PoolCorruptError("pool document is not valid UTF-8", e.start) from e
    except json.JSONDecodeError as e:
        raise PoolCorruptError(f"pool document is not valid JSON: {e.msg}", e.pos) from e
    if not isinstance(doc, dict) or doc.get("schema") != SCHEMA_VERSION:
        raise PoolCorruptError(f"unexpected schema {doc.get('schema') if isinstance(doc, dict) else doc!r}")
    try:
        pool = SamplePool(
            labeled=set(doc["labeled"]),
            unlabeled=set(doc["unlabeled"]),
            candidate=set(doc["candidate"]),
        )
    except (KeyError, TypeError) as e:
        raise PoolCorruptError(f"pool document missing field: {e}") from e
    pool.audit()
    return pool


def softmax_probmap(logits: np.ndarray) -> ProbMap:
    """Numerically stable softmax over the class axis of (C, H, W) logits."""
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return ProbMap(e / e.sum(axis=0, keepdims=True))


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; constant input maps to all zeros."""
    v = np.asarray(values, dtype=np.float32)
    lo, hi = float(v.min()), float(v.max())
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


# Run-length encoding over the flattened row-major pixel grid. Used for
# candidate regions, annotation brushes and mask wire formats.

def rle_encode_mask(mask: np.ndarray) -> list[list[int]]:
    flat = np.asarray(mask, dtype=bool).ravel()
    if not flat.any():
        return []
    padded = np.concatenate([[False], flat, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = edges[::2], edges[1::2]
    return [[int(s), int(e - s)] for s, e in zip(starts, ends)]


def rle_decode_mask(runs: list[list[int]], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    for start, length in runs:
        if start < 0 or length < 0 or start + length > flat.size:
            raise ValueError(f"run ({start}, {length}) outside grid of {flat.size} pixels")
        flat[start:start + length] = True
    return flat.reshape(shape)


def rle_encode_labels(labels: np.ndarray) -> list[list[int]]:
    """Lossless (value, count) runs of a label array, row-major."""
    flat = np.asarray(labels).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [flat.size]])
    return [[int(flat[s]), int(e - s)] for s, e in zip(starts, ends)]


def rle_decode_labels(runs: list[list[int]], shape: tuple[int, int]) -> np.ndarray:
    total = shape[0] * shape[1]
    flat = np.empty(total, dtype=np.int64)
    pos = 0
    for value, count in runs:
        flat[pos:pos + count] = value
        pos += count
    if pos != total:
        raise ValueError(f"label runs cover {pos} pixels, grid has {total}")
    return flat.reshape(shape)


LookupFn = Callable[[str], DepthMap]
