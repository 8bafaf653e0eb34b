"""Per-pixel Shannon entropy of the predicted class distribution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import HeatMap, ProbMap


@dataclass(frozen=True)
class EntropyStats:
    """Summary of the raw entropy field, in bits."""

    mean: float
    max: float
    min: float
    _raw: np.ndarray = None  # non-ignored raw values backing fraction_above

    def fraction_above(self, bits: float) -> float:
        """Share of (non-ignored) pixels whose raw entropy exceeds ``bits``."""
        if self._raw is None or self._raw.size == 0:
            return 0.0
        return float(np.mean(self._raw > bits))


def entropy_map(probs: ProbMap, ignore_mask: np.ndarray | None = None) -> tuple[HeatMap, EntropyStats]:
    """Entropy heatmap plus stats; 0*log(0) counts as 0.

    Stats are computed on the raw bits; the stored map is divided by
    log2(C) and clamped to [0, 1]. Ignored pixels are zeroed in the map and
    excluded from the stats.
    """
    p = probs.probs.astype(np.float64)
    c = probs.num_classes
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(p), 0.0)
    raw = terms.sum(axis=0)
    if ignore_mask is not None:
        raw = np.where(ignore_mask, 0.0, raw)
        kept = raw[~ignore_mask]
    else:
        kept = raw.ravel()
    normalized = np.clip(raw / np.log2(c), 0.0, 1.0)
    stats = EntropyStats(
        mean=float(kept.mean()) if kept.size else 0.0,
        max=float(kept.max()) if kept.size else 0.0,
        min=float(kept.min()) if kept.size else 0.0,
        _raw=kept.copy(),
    )
    return HeatMap(normalized.astype(np.float32), kind="entropy"), stats


def mean_image_entropy(probs: ProbMap, ignore_mask: np.ndarray | None = None) -> float:
    """Mean raw entropy in bits, the image-level uncertainty score."""
    _, stats = entropy_map(probs, ignore_mask)
    return stats.mean
