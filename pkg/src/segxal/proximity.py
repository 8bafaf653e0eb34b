"""Depth-guided saliency: proximity masking, GradCAM and their composition.

Pipeline: relative depth -> per-image adaptive threshold -> soft attention
image -> class activation maps on that image -> nearness-weighted saliency.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import DepthMap, HeatMap, Image, Sample, SegxalError, ShapeMismatchError, minmax_normalize
from .model import UNetSegmenter
from .pngio import load_depth_png

DEGENERATE_EPS = 1e-9


class DepthCoverageError(SegxalError):
    pass


@dataclass(frozen=True)
class ProximityMask:
    soft: HeatMap  # kind="proximity"
    tau_used: float  # realized per-image threshold on nearness


class DepthProvider:
    """Maps sample ids to depth maps.

    ``synthetic_gt`` serves the generator's own depth; the file kinds read
    <sample_id>.depth.png (16-bit) from a directory, standing in for the
    external monocular-depth preprocessing step.
    """

    def __init__(self, kind: str, directory: str | Path | None = None):
        if kind not in ("synthetic_gt", "file_midas", "file_dinov2"):
            raise ValueError(f"unknown depth provider kind {kind!r}")
        if kind != "synthetic_gt" and directory is None:
            raise ValueError(f"{kind} provider needs a directory")
        self.kind = kind
        self.directory = Path(directory) if directory is not None else None

    def lookup(self, sample: Sample) -> DepthMap:
        if self.kind == "synthetic_gt":
            if sample.depth is None:
                raise DepthCoverageError(f"sample {sample.id} has no ground-truth depth")
            return sample.depth
        path = self.directory / f"{sample.id}.depth.png"
        if not path.exists():
            raise DepthCoverageError(f"no depth file {path}")
        provider = "file_midas" if self.kind == "file_midas" else "file_dinov2"
        dm = load_depth_png(path, provider=provider)
        if dm.shape != sample.image.shape:
            raise ShapeMismatchError(
                f"depth {dm.shape} does not match image {sample.image.shape} for {sample.id}")
        return dm

    def covers(self, sample_ids: list[str], samples: dict[str, Sample] | None = None) -> list[str]:
        """Ids without depth coverage (empty list = full coverage)."""
        missing = []
        for sid in sample_ids:
            if self.kind == "synthetic_gt":
                if samples is None or samples[sid].depth is None:
                    missing.append(sid)
            elif not (self.directory / f"{sid}.depth.png").exists():
                missing.append(sid)
        return missing


def proximity_mask(depth: DepthMap, tau_quantile: float, hard: bool = False) -> ProximityMask:
    """Soft attention mask keeping the nearest ``tau_quantile`` share of pixels.

    Threshold t is the (1 - tau_quantile) quantile of nearness; above it the
    mask ramps linearly to 1 (or is binary in hard mode). Constant depth is
    degenerate: the mask is all ones and a warning is emitted.
    """
    near = depth.depth.astype(np.float64)
    if float(near.max() - near.min()) < DEGENERATE_EPS:
        warnings.warn("constant depth map, proximity mask degenerates to all ones")
        soft = np.ones_like(near, dtype=np.float32)
        return ProximityMask(HeatMap(soft, kind="proximity", flags=("degenerate_depth",)),
                             tau_used=float(near.flat[0]))
    t = float(np.quantile(near, 1.0 - tau_quantile))
    if hard:
        soft = (near >= t).astype(np.float32)
    elif t >= 1.0:
        soft = near.astype(np.float32)
    else:
        soft = np.clip((near - t) / (1.0 - t), 0.0, 1.0).astype(np.float32)
    return ProximityMask(HeatMap(soft, kind="proximity"), tau_used=t)


def depth_informed_image(image: Image, mask: ProximityMask) -> Image:
    """Per-pixel, per-channel multiply of the image by the soft mask."""
    if mask.soft.shape != image.shape:
        raise ShapeMismatchError(f"mask {mask.soft.shape} vs image {image.shape}")
    out = image.pixels * mask.soft.values[:, :, None]
    return Image(out.astype(np.float32), id=f"{image.id}#depth_informed", source=image.source)


def _upsample_bilinear(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if arr.shape == shape:
        return arr.astype(np.float32)
    t = torch.from_numpy(arr.astype(np.float32))[None, None]
    out = F.interpolate(t, size=shape, mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def gradcam(
    model: UNetSegmenter, image: Image, target_class: int,
    target_layer: str | None = None, z_mode: str = "positive_grad_sum",
) -> HeatMap:
    """Gradient-weighted class activation map, min-max normalized to [0, 1].

    Channel weights are the gradient sums divided by Z, where Z is either
    the sum of positive gradient entries (default) or the spatial position
    count. An all-zero map is legal and comes back flagged.
    """
    ctx = model.class_score_with_grads(image, target_class, target_layer)
    if z_mode == "positive_grad_sum":
        z = ctx.z_positive if ctx.z_positive > 0 else 1.0
    elif z_mode == "spatial_count":
        z = float(ctx.spatial_count)
    else:
        raise ValueError(f"unknown z_mode {z_mode!r}")
    weights = ctx.gradients.sum(axis=(1, 2)) / z  # (K,)
    raw = np.maximum((weights[:, None, None] * ctx.activations).sum(axis=0), 0.0)
    full = _upsample_bilinear(raw, image.shape)
    if full.max() <= 0.0:
        return HeatMap(np.zeros(image.shape, dtype=np.float32), kind="gradcam",
                       flags=("all_zero",))
    return HeatMap(minmax_normalize(full), kind="gradcam")


def prox_gradcam(
    model: UNetSegmenter, sample: Sample, provider: DepthProvider,
    tau_quantile: float, min_area_fraction: float = 0.01,
    target_layer: str | None = None, z_mode: str = "positive_grad_sum",
    hard: bool = False,
) -> HeatMap:
    """Proximity-aware saliency over the classes present near the camera.

    Classes whose predicted area within the mask support exceeds
    ``min_area_fraction`` each get a class activation map on the
    depth-informed image; the output is their pixelwise maximum. With no
    qualifying class the proximity mask itself is returned, flagged.
    """
    depth = provider.lookup(sample)
    pmask = proximity_mask(depth, tau_quantile, hard=hard)
    support = pmask.soft.values > 0
    fallback_flags = ("fallback_proximity",) + pmask.soft.flags
    if not support.any():
        return HeatMap(pmask.soft.values.copy(), kind="prox_gradcam", flags=fallback_flags)

    focused = depth_informed_image(sample.image, pmask)
    pred = model.predict_probs(focused).argmax()
    in_support = pred[support]
    counts = np.bincount(in_support.ravel(), minlength=model.num_classes)
    fractions = counts / max(1, in_support.size)
    targets = [c for c in range(model.num_classes) if fractions[c] > min_area_fraction]
    if not targets:
        return HeatMap(pmask.soft.values.copy(), kind="prox_gradcam", flags=fallback_flags)

    stack = []
    flags: tuple[str, ...] = ()
    for c in targets:
        cam = gradcam(model, focused, c, target_layer, z_mode)
        stack.append(cam.values)
    # weight by the attention mask: saliency leaking into the blacked-out
    # far field (bias/normalization offsets) must not survive, per the
    # support-containment contract of this map
    merged = np.max(np.stack(stack), axis=0) * pmask.soft.values
    if merged.max() <= 0.0:
        flags = ("all_zero",)
        values = np.zeros_like(merged)
    else:
        values = minmax_normalize(merged)
    return HeatMap(values.astype(np.float32), kind="prox_gradcam", flags=flags)
