"""Segmentation quality metrics: per-class IoU over aggregated confusion
counts, and summary statistics of per-sample similarity scores."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import IGNORE, LabelMask, Sample, SegxalError
from .selection import dice


class EmptyEvalSetError(SegxalError):
    pass


@dataclass
class MetricsReport:
    per_class_iou: dict[int, float]
    miou: float
    dice_stats: dict[str, float]
    samples_labeled: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "schema": "segxal/1",
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "miou": self.miou,
            "dice_stats": self.dice_stats,
            "samples_labeled": self.samples_labeled,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            per_class_iou={int(k): v for k, v in d["per_class_iou"].items()},
            miou=d["miou"],
            dice_stats=d["dice_stats"],
            samples_labeled=d.get("samples_labeled", 0),
            wall_time=d.get("wall_time", 0.0),
        )


def confusion_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """(C, C) matrix of gt-row / pred-column counts, ignore excluded."""
    keep = gt != IGNORE
    g, p = gt[keep].astype(np.int64), pred[keep].astype(np.int64)
    idx = g * num_classes + p
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> dict[int, float]:
    """IoU for every class with ground-truth presence."""
    out = {}
    for c in range(cm.shape[0]):
        gt_total = cm[c, :].sum()
        if gt_total == 0:
            continue
        tp = cm[c, c]
        union = gt_total + cm[:, c].sum() - tp
        out[c] = float(tp / union) if union > 0 else 0.0
    return out


def compute_metrics(model, eval_samples: list[Sample], samples_labeled: int = 0) -> MetricsReport:
    """Aggregate IoU over the whole eval set plus per-sample dice stats."""
    if not eval_samples:
        raise EmptyEvalSetError("evaluation set is empty")
    missing = [s.id for s in eval_samples if s.gt is None]
    if missing:
        raise EmptyEvalSetError(f"eval samples without gt: {missing[:5]}")
    num_classes = eval_samples[0].gt.num_classes
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    dices = []
    for s in eval_samples:
        pred = model.predict_probs(s.image).argmax()
        cm += confusion_counts(pred, s.gt.labels, num_classes)
        dices.append(dice(LabelMask(pred, num_classes), s.gt))
    per_class = iou_from_confusion(cm)
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    dices = np.asarray(dices)
    return MetricsReport(
        per_class_iou=per_class,
        miou=miou,
        dice_stats={"mean": float(dices.mean()), "min": float(dices.min()),
                    "max": float(dices.max())},
        samples_labeled=samples_labeled,
    )
