"""PNG file formats for labels, depth, images and heatmap debug exports.

Label masks: single-channel 8-bit, pixel value = class id, 255 = ignore.
Depth maps: single-channel 16-bit, nearness = v / 65535 (bit-exact).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import DepthMap, HeatMap, Image, LabelMask

DEPTH_SCALE = 65535


def save_label_png(mask: LabelMask, path: str | Path) -> None:
    arr = mask.labels.astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path, format="PNG")


def load_label_png(path: str | Path, num_classes: int) -> LabelMask:
    arr = np.asarray(PILImage.open(path).convert("L"), dtype=np.int64)
    return LabelMask(arr, num_classes)


def save_depth_png(depth: DepthMap, path: str | Path) -> None:
    q = np.round(np.clip(depth.depth, 0.0, 1.0) * DEPTH_SCALE).astype(np.uint16)
    img = PILImage.fromarray(q.astype(np.uint16))
    img.save(path, format="PNG")


def load_depth_png(path: str | Path, provider: str = "synthetic") -> DepthMap:
    img = PILImage.open(path)
    arr = np.asarray(img, dtype=np.float64)
    return DepthMap((arr / DEPTH_SCALE).astype(np.float32), provider=provider)


def save_image_png(image: Image, path: str | Path) -> None:
    arr = np.round(np.clip(image.pixels, 0.0, 1.0) * 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image_png(path: str | Path, image_id: str, source: str = "synthetic") -> Image:
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return Image(arr, id=image_id, source=source)


def save_heatmap_png(hm: HeatMap, path: str | Path) -> None:
    """Debug export: 8-bit grayscale, value = round(255 * normalized)."""
    arr = np.round(np.clip(hm.values, 0.0, 1.0) * 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path, format="PNG")


def heatmap_colormap_lut() -> np.ndarray:
    """Fixed 256x3 uint8 colormap for overlays: blue -> cyan -> yellow -> red.

    Piecewise-linear in three equal segments of the byte range; identical
    table on every platform so golden-PNG tests stay bit-exact.
    """
    lut = np.zeros((256, 3), dtype=np.float64)
    t = np.arange(256) / 255.0
    # blue (0,0,1) -> cyan (0,1,1) -> yellow (1,1,0) -> red (1,0,0)
    seg = np.clip(t * 3.0, 0.0, 3.0)
    r = np.clip(seg - 1.0, 0.0, 1.0)
    g = np.where(seg < 1.0, seg, np.where(seg < 2.0, 1.0, np.clip(3.0 - seg, 0.0, 1.0)))
    b = np.clip(1.0 - np.maximum(seg - 1.0, 0.0), 0.0, 1.0)
    lut[:, 0], lut[:, 1], lut[:, 2] = r, g, b
    return np.round(lut * 255).astype(np.uint8)


_LUT = heatmap_colormap_lut()


def save_overlay_png(image: Image, hm: HeatMap, path: str | Path, alpha: float = 0.5) -> None:
    """Alpha-blend a colormapped heatmap over the image and save as PNG."""
    byte_heat = np.round(np.clip(hm.values, 0.0, 1.0) * 255).astype(np.uint8)
    colored = _LUT[byte_heat]  # (H, W, 3) uint8
    base = np.clip(image.pixels, 0.0, 1.0) * 255
    blended = np.round((1.0 - alpha) * base + alpha * colored).astype(np.uint8)
    PILImage.fromarray(blended, mode="RGB").save(path, format="PNG")
