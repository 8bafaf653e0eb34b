"""Weighted fusion of the saliency and uncertainty maps, plus region prompts.

The fused mask is alpha * proximity-saliency + beta * entropy, clamped to
[0, 1]; with the default 0.5/0.5 weights the clamp is inert. Candidate
prompts are ranked connected regions of the thresholded mask, each with an
anchor point for the annotation UI.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import HeatMap, ShapeMismatchError, rle_decode_mask, rle_encode_mask
from .pngio import save_heatmap_png

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass(frozen=True)
class EEMask:
    map: HeatMap  # kind="eem"
    alpha: float
    beta: float
    provenance: tuple[str, str] = ("prox_gradcam", "entropy")


@dataclass(frozen=True)
class CandidatePrompt:
    sample_id: str
    rle: tuple[tuple[int, int], ...]  # row-major (start, length) runs
    anchor: tuple[int, int]  # (i, j), inside the region
    score: float  # mean fused value over the region
    rank: int
    area: int

    def mask(self, shape: tuple[int, int]) -> np.ndarray:
        return rle_decode_mask([list(r) for r in self.rle], shape)

    def to_dict(self) -> dict:
        return {"rank": self.rank, "score": self.score, "area": self.area,
                "anchor": list(self.anchor), "rle": [list(r) for r in self.rle]}

    @classmethod
    def from_dict(cls, d: dict, sample_id: str) -> "CandidatePrompt":
        return cls(sample_id=sample_id, rle=tuple(tuple(r) for r in d["rle"]),
                   anchor=(d["anchor"][0], d["anchor"][1]), score=d["score"],
                   rank=d["rank"], area=d["area"])


def fuse(prox: HeatMap, ent: HeatMap, alpha: float, beta: float) -> EEMask:
    if prox.shape != ent.shape:
        raise ShapeMismatchError(f"prox {prox.shape} vs entropy {ent.shape}")
    if alpha + beta <= 0:
        raise ValueError("alpha + beta must be positive")
    fusedflags = tuple(sorted(set(prox.flags) | set(ent.flags)))
    values = np.clip(alpha * prox.values + beta * ent.values, 0.0, 1.0)
    return EEMask(HeatMap(values.astype(np.float32), kind="eem", flags=fusedflags),
                  alpha=alpha, beta=beta)


def extract_candidates(
    eem: EEMask, sample_id: str, percentile: float = 80.0,
    max_regions: int = 5, min_region_px: int = 16,
) -> list[CandidatePrompt]:
    """Ranked connected high-value regions of the fused mask.

    Binarizes at the given percentile of the nonzero values, keeps
    4-connected components of at least ``min_region_px`` pixels and returns
    the top ``max_regions`` by mean value, ranks 1..k.
    """
    if not (0 < percentile < 100):
        raise ValueError(f"percentile must be in (0, 100), got {percentile}")
    values = eem.map.values
    nonzero = values[values > 0]
    if nonzero.size == 0:
        return []
    # "lower" keeps the threshold at an attained value, so a plateau sitting
    # exactly at the percentile stays in rather than being interpolated out
    threshold = float(np.percentile(nonzero, percentile, method="lower"))
    binary = values >= threshold
    labeled, n = ndimage.label(binary, structure=FOUR_CONNECTED)
    regions = []
    for lab in range(1, n + 1):
        mask = labeled == lab
        area = int(mask.sum())
        if area < min_region_px:
            continue
        score = float(values[mask].mean())
        regions.append((score, mask, area))
    # deterministic tiebreak: earlier (row-major) region first at equal score
    regions.sort(key=lambda r: (-r[0], int(np.flatnonzero(r[1].ravel())[0])))
    prompts = []
    for rank, (score, mask, area) in enumerate(regions[:max_regions], start=1):
        anchor = _weighted_anchor(values, mask)
        prompts.append(CandidatePrompt(
            sample_id=sample_id,
            rle=tuple(tuple(r) for r in rle_encode_mask(mask)),
            anchor=anchor, score=score, rank=rank, area=area))
    return prompts


def _weighted_anchor(values: np.ndarray, mask: np.ndarray) -> tuple[int, int]:
    """Value-weighted centroid snapped to the nearest in-region pixel."""
    ii, jj = np.nonzero(mask)
    w = values[ii, jj].astype(np.float64)
    if w.sum() <= 0:
        w = np.ones_like(w)
    ci = float((w * ii).sum() / w.sum())
    cj = float((w * jj).sum() / w.sum())
    d2 = (ii - ci) ** 2 + (jj - cj) ** 2
    k = int(np.argmin(d2))  # argmin takes the first (smallest index) on ties
    return int(ii[k]), int(jj[k])


def export_eem(
    eem: EEMask, prompts: list[CandidatePrompt], png_path: str | Path,
    sidecar_path: str | Path, percentile: float,
) -> None:
    """Grayscale PNG of the mask plus a JSON sidecar describing the prompts."""
    save_heatmap_png(eem.map, png_path)
    doc = {
        "schema": "segxal/1",
        "alpha": eem.alpha,
        "beta": eem.beta,
        "percentile": percentile,
        "regions": [p.to_dict() for p in prompts],
    }
    Path(sidecar_path).write_text(json.dumps(doc, indent=2, sort_keys=True))
