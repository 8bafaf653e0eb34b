"""Synthetic driving-like scene generation, Cityscapes ingestion and splits.

Synthetic scenes: class 0 is a sky band, class 1 a road trapezoid, classes
2..C-1 are textured rectangles standing on the road. Ground-truth nearness
rises toward the bottom of the frame; objects inherit the nearness of the
row they stand on, so lower objects are nearer and occlude farther ones.

Object classes deliberately share one base color and differ only in
texture pattern (speckle / horizontal / vertical stripes). Color alone
separates sky and road immediately, while the patterned classes need more
training data, which gives the active-learning benchmark a useful
quantity-vs-quality gradient.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import ALConfig, DepthMap, Image, LabelMask, Sample, SamplePool, SegxalError
from .pngio import load_depth_png, load_image_png, load_label_png, save_depth_png, save_image_png, save_label_png

MANIFEST_NAME = "manifest.json"

SKY_NEARNESS = 0.01
GROUND_NEAR_MIN = 0.06
BASE_NOISE = 0.05
PATTERN_AMP = 0.16
MIN_OBJECT_AREA = 48  # px, breathing room for the smallest placeable rectangle


class SceneTooSmallError(SegxalError):
    pass


class MissingPairError(SegxalError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    num_classes: int
    num_objects: int
    seed: int

    def __post_init__(self):
        if self.num_objects < 0:
            raise ValueError("num_objects must be >= 0")
        if self.num_classes < 3:
            raise ValueError("need at least sky, road and one object class")


@dataclass(frozen=True)
class PlacedObject:
    cls: int
    x0: int
    y0: int
    x1: int  # exclusive
    y1: int  # exclusive
    base_row: int
    nearness: float


def _class_color(c: int, num_classes: int) -> tuple[float, float, float]:
    if c == 0:
        return (0.55, 0.70, 0.90)
    if c == 1:
        return (0.30, 0.30, 0.33)
    # object classes share a mid-gray base with a weak class tint: color
    # bootstraps rough object detection, the texture pattern carries the
    # full identity. Speckle-4 classes get a fainter tint, which makes the
    # rare class a slow learner that keeps improving with coverage.
    base = np.array([0.50, 0.48, 0.46])
    h = ((c - 2) * 0.37) % 1.0
    magnitude = 0.040 if _PATTERN_MODES[(c - 2) % len(_PATTERN_MODES)] == ("speckle", 4) else 0.045
    tint = np.array(colorsys.hsv_to_rgb(h, 1.0, 1.0)) - 0.5
    r, g, b = np.clip(base + magnitude * tint, 0.0, 1.0)
    return (float(r), float(g), float(b))


def _class_base_row_range(c: int, num_classes: int) -> tuple[float, float]:
    """Where along the road (0 = horizon, 1 = bottom) a class may stand.

    Rarer classes keep to the near field, the scene property that makes
    proximity-aware acquisition informative.
    """
    if num_classes <= 3:
        return (0.15, 1.0)
    frac = (c - 2) / (num_classes - 3)
    return (0.15 + 0.45 * frac, 1.0)


def class_palette(num_classes: int) -> np.ndarray:
    """Display palette (not the generation colors): distinct hues per class."""
    out = np.zeros((num_classes, 3), dtype=np.uint8)
    out[0] = (135, 180, 230)
    if num_classes > 1:
        out[1] = (80, 80, 85)
    for c in range(2, num_classes):
        h = ((c - 2) * 0.618033988749895) % 1.0
        r, g, b = colorsys.hsv_to_rgb(h, 0.65, 0.85)
        out[c] = (int(r * 255), int(g * 255), int(b * 255))
    return out


_PATTERN_MODES = (("speckle", 2), ("hstripe", 0), ("speckle", 4), ("vstripe", 0))


def _object_pattern(c: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Per-class texture field in [-1, 1], shape (h, w).

    Speckle classes differ only in correlation scale (2 px vs 3 px blocks):
    telling them apart takes texture statistics, not color, which makes the
    rarer of the pair genuinely data hungry.
    """
    yy, xx = np.mgrid[0:h, 0:w]
    kind, param = _PATTERN_MODES[(c - 2) % len(_PATTERN_MODES)]
    if kind == "speckle":
        b = param
        blocks = rng.uniform(-1.0, 1.0, ((h + b - 1) // b, (w + b - 1) // b))
        field = np.repeat(np.repeat(blocks, b, axis=0), b, axis=1)[:h, :w]
    elif kind == "hstripe":
        field = np.sign(np.sin(2 * np.pi * yy / 4.0) + 1e-9)
    else:
        field = np.sign(np.sin(2 * np.pi * xx / 4.0) + 1e-9)
    return field


def _ground_nearness(height: int, horizon: int) -> np.ndarray:
    rows = np.arange(height, dtype=np.float64)
    u = np.clip((rows - horizon) / max(1, height - 1 - horizon), 0.0, 1.0)
    return GROUND_NEAR_MIN + (1.0 - GROUND_NEAR_MIN) * u ** 1.25


def generate_scene_with_record(spec: SceneSpec) -> tuple[Sample, list[PlacedObject]]:
    """Deterministic scene synthesis; returns the sample and the placement record."""
    h, w, c_total = spec.height, spec.width, spec.num_classes
    if h < 16 or w < 16:
        raise SceneTooSmallError(f"scene {h}x{w} below the 16x16 minimum")
    rng = np.random.default_rng(spec.seed)

    horizon = int(h * rng.uniform(0.30, 0.44))
    road_area = (h - horizon) * w
    if spec.num_objects * MIN_OBJECT_AREA > road_area:
        raise SceneTooSmallError(
            f"{spec.num_objects} objects need more than the {road_area} px of road")

    labels = np.zeros((h, w), dtype=np.int64)
    pixels = np.zeros((h, w, 3), dtype=np.float64)
    ground_near = _ground_nearness(h, horizon)
    depth = np.full((h, w), SKY_NEARNESS, dtype=np.float64)
    depth[horizon:, :] = ground_near[horizon:, None]

    # sky band (plus off-road wedges below; same texture, same class)
    sky_col = np.array(_class_color(0, c_total))
    pixels[:] = sky_col + rng.uniform(-BASE_NOISE, BASE_NOISE, (h, w, 3))

    # road trapezoid, widening toward the bottom edge
    road_col = np.array(_class_color(1, c_total))
    top_half_w = w * rng.uniform(0.14, 0.22)
    cx = w / 2.0
    rows = np.arange(h)
    u = np.clip((rows - horizon) / max(1, h - 1 - horizon), 0.0, 1.0)
    half_w = top_half_w + (w / 2.0 - top_half_w) * u
    cols = np.arange(w)
    road_mask = (np.abs(cols[None, :] + 0.5 - cx) <= half_w[:, None]) & (rows[:, None] >= horizon)
    labels[road_mask] = 1
    road_noise = rng.uniform(-BASE_NOISE, BASE_NOISE, (h, w, 3))
    pixels[road_mask] = road_col + road_noise[road_mask]

    # objects, farthest first so nearer ones occlude
    object_classes = np.arange(2, c_total)
    weights = 0.35 ** np.arange(object_classes.size)
    weights /= weights.sum()
    placements: list[PlacedObject] = []
    draws = []
    for _ in range(spec.num_objects):
        cls = int(rng.choice(object_classes, p=weights))
        u_lo, u_hi = _class_base_row_range(cls, c_total)
        base_u = rng.uniform(u_lo, u_hi)
        base_row = int(horizon + base_u * (h - 1 - horizon))
        near = float(ground_near[base_row])
        obj_h = max(4, int(round(h * (0.10 + 0.30 * near))))
        obj_w = max(4, int(round(obj_h * rng.uniform(1.1, 1.8))))
        row_half = half_w[base_row]
        x_lo = int(max(0, cx - row_half))
        x_hi = int(min(w - obj_w, cx + row_half - obj_w))
        if x_hi < x_lo:
            x_lo, x_hi = 0, max(0, w - obj_w)
        x0 = int(rng.integers(x_lo, x_hi + 1))
        tint = rng.uniform(0.88, 1.12, 3)
        draws.append((cls, base_row, near, obj_h, obj_w, x0, tint))

    for cls, base_row, near, obj_h, obj_w, x0, tint in sorted(draws, key=lambda d: d[1]):
        y1 = base_row + 1
        y0 = max(0, y1 - obj_h)
        x1 = min(w, x0 + obj_w)
        pat = _object_pattern(cls, y1 - y0, x1 - x0, rng)
        base = np.array(_class_color(cls, c_total)) * tint
        region = base[None, None, :] + PATTERN_AMP * pat[:, :, None]
        region = region + rng.uniform(-BASE_NOISE, BASE_NOISE, region.shape)
        pixels[y0:y1, x0:x1] = region
        labels[y0:y1, x0:x1] = cls
        depth[y0:y1, x0:x1] = near
        placements.append(PlacedObject(cls, x0, y0, x1, y1, base_row, near))

    sample = Sample(
        image=Image(np.clip(pixels, 0.0, 1.0).astype(np.float32),
                    id=f"syn_{spec.seed:08d}", source="synthetic"),
        gt=LabelMask(labels, num_classes=c_total),
        depth=DepthMap(np.clip(depth, 0.0, 1.0).astype(np.float32), provider="synthetic"),
    )
    return sample, placements


def generate_scene(spec: SceneSpec) -> Sample:
    sample, _ = generate_scene_with_record(spec)
    return sample


def paired_vehicle_scene(
    width: int, height: int, num_classes: int, seed: int, vehicle_class: int = 2,
) -> tuple[Sample, np.ndarray, np.ndarray]:
    """A scene with two identical vehicles, one near and one far.

    Returns (sample, near_mask, far_mask); the two rectangles share class,
    size and texture so only their depth separates them.
    """
    rng = np.random.default_rng(seed)
    base = generate_scene(SceneSpec(width, height, num_classes, 0, seed))
    h, w = height, width
    labels = base.gt.labels.copy()
    pixels = base.image.pixels.astype(np.float64).copy()
    depth = base.depth.depth.astype(np.float64).copy()
    horizon = int(np.argmax(labels.any(axis=1) & (labels == 1).any(axis=1)))
    ground_near = _ground_nearness(h, horizon)

    obj_h = max(6, int(round(h * 0.22)))
    obj_w = max(6, int(round(obj_h * 1.5)))
    near_base = int(h * 0.92)
    far_base = int(horizon + 0.14 * (h - 1 - horizon))
    far_base = max(far_base, obj_h)  # keep the far box fully in frame
    left_x = int(w * 0.18)
    right_x = int(w * 0.62)
    if rng.random() < 0.5:
        near_x, far_x = left_x, right_x
    else:
        near_x, far_x = right_x, left_x

    pat = _object_pattern(vehicle_class, obj_h, obj_w, np.random.default_rng(seed + 1))
    tint = np.random.default_rng(seed + 2).uniform(0.88, 1.12, 3)
    tex = np.array(_class_color(vehicle_class, num_classes)) * tint
    region = tex[None, None, :] + PATTERN_AMP * pat[:, :, None]

    masks = []
    for base_row, x0 in ((far_base, far_x), (near_base, near_x)):
        y1, y0 = base_row + 1, base_row + 1 - obj_h
        x1 = min(w, x0 + obj_w)
        pixels[y0:y1, x0:x1] = region[:, : x1 - x0]
        labels[y0:y1, x0:x1] = vehicle_class
        depth[y0:y1, x0:x1] = ground_near[base_row]
        m = np.zeros((h, w), dtype=bool)
        m[y0:y1, x0:x1] = True
        masks.append(m)
    far_mask, near_mask = masks
    far_mask &= ~near_mask  # occlusion order: near painted last

    sample = Sample(
        image=Image(np.clip(pixels, 0.0, 1.0).astype(np.float32),
                    id=f"pair_{seed:08d}", source="synthetic"),
        gt=LabelMask(labels, num_classes=num_classes),
        depth=DepthMap(np.clip(depth, 0.0, 1.0).astype(np.float32), provider="synthetic"),
    )
    return sample, near_mask, far_mask


def make_synthetic_dataset(
    n: int, width: int, height: int, num_classes: int, seed: int, max_objects: int = 4,
) -> tuple[list[Sample], list[SceneSpec]]:
    """n deterministic scenes with a skewed object-count distribution."""
    rng = np.random.default_rng(seed)
    counts = rng.choice(
        np.arange(max_objects + 1),
        size=n,
        p=_object_count_probs(max_objects),
    )
    samples, specs = [], []
    for i in range(n):
        spec = SceneSpec(width, height, num_classes, int(counts[i]), seed * 100003 + i)
        specs.append(spec)
        samples.append(generate_scene(spec))
    return samples, specs


def _object_count_probs(max_objects: int) -> np.ndarray:
    # a quarter of scenes are empty so acquisition choices actually matter
    if max_objects == 0:
        return np.array([1.0])
    rest = np.full(max_objects, 0.75 / max_objects)
    return np.concatenate([[0.25], rest])


def export_synthetic_dataset(out_dir: str | Path, samples: list[Sample], specs: list[SceneSpec]) -> Path:
    out = Path(out_dir)
    for sub in ("image", "label", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    ids = []
    for s in samples:
        ids.append(s.id)
        save_image_png(s.image, out / "image" / f"{s.id}.png")
        save_label_png(s.gt, out / "label" / f"{s.id}.png")
        save_depth_png(s.depth, out / "depth" / f"{s.id}.depth.png")
    manifest = {
        "schema": "segxal/1",
        "ids": ids,
        "scene_specs": [asdict(sp) for sp in specs],
        "num_classes": specs[0].num_classes if specs else 0,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out / MANIFEST_NAME


def load_synthetic_dataset(root: str | Path) -> list[Sample]:
    root = Path(root)
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    num_classes = manifest["num_classes"]
    samples = []
    for sid in manifest["ids"]:
        image = load_image_png(root / "image" / f"{sid}.png", sid)
        gt = load_label_png(root / "label" / f"{sid}.png", num_classes)
        depth = load_depth_png(root / "depth" / f"{sid}.depth.png")
        samples.append(Sample(image=image, gt=gt, depth=depth))
    return samples


# Cityscapes raw label ids -> the 19 evaluated trainIds; all else -> 255.
CITYSCAPES_ID_TO_TRAINID = {
    7: 0, 8: 1, 11: 2, 12: 3, 13: 4, 17: 5, 19: 6, 20: 7, 21: 8, 22: 9,
    23: 10, 24: 11, 25: 12, 26: 13, 27: 14, 28: 15, 31: 16, 32: 17, 33: 18,
}
CITYSCAPES_NUM_CLASSES = 19

_TRAINID_LUT = np.full(256, 255, dtype=np.int64)
for _raw, _train in CITYSCAPES_ID_TO_TRAINID.items():
    _TRAINID_LUT[_raw] = _train


def remap_cityscapes_ids(raw: np.ndarray) -> np.ndarray:
    return _TRAINID_LUT[np.clip(raw, 0, 255).astype(np.int64)]


def load_cityscapes_dir(
    root: str | Path, split: str, size: tuple[int, int] = (64, 128),
) -> list[Sample]:
    """Load a leftImg8bit/gtFine directory tree at the configured resolution.

    Labels resize by nearest neighbor, images bilinearly; raw ids remap to
    the 19 trainIds with 255 ignore. Train/val images without a label file
    raise MissingPairError; the test split may be unlabeled.
    """
    if split not in ("train", "val", "test"):
        raise ValueError(f"unknown split {split!r}")
    root = Path(root)
    img_dir = root / "leftImg8bit" / split
    label_dir = root / "gtFine" / split
    h, w = size
    samples = []
    for img_path in sorted(img_dir.glob("*/*_leftImg8bit.png")):
        stem = img_path.name[: -len("_leftImg8bit.png")]
        city = img_path.parent.name
        label_path = label_dir / city / f"{stem}_gtFine_labelIds.png"
        pil = PILImage.open(img_path).convert("RGB").resize((w, h), PILImage.BILINEAR)
        image = Image(np.asarray(pil, dtype=np.float32) / 255.0,
                      id=f"{city}_{stem}", source="cityscapes")
        gt = None
        if label_path.exists():
            raw = PILImage.open(label_path).resize((w, h), PILImage.NEAREST)
            gt = LabelMask(remap_cityscapes_ids(np.asarray(raw)), CITYSCAPES_NUM_CLASSES)
        elif split in ("train", "val"):
            raise MissingPairError(f"no label file for {img_path}")
        samples.append(Sample(image=image, gt=gt))
    return samples


def initial_split(samples: list[Sample], config: ALConfig, seed: int | None = None) -> SamplePool:
    """Random initial labeled/unlabeled partition, deterministic in seed."""
    if len(samples) < 10:
        raise ValueError(f"need at least 10 samples to split, got {len(samples)}")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    ids = [s.id for s in samples]
    order = rng.permutation(len(ids))
    k = int(round(config.initial_label_fraction * len(ids)))
    labeled = {ids[i] for i in order[:k]}
    unlabeled = {ids[i] for i in order[k:]}
    pool = SamplePool(labeled=labeled, unlabeled=unlabeled)
    pool.audit()
    return pool
