"""Similarity scoring of predictions against oracle corrections and the
threshold gate that admits samples into the labeled pool."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import IGNORE, LabelMask, Sample, SamplePool, SegxalError, ShapeMismatchError
from .oracle import AnnotationRecord


class SampleNotCandidateError(SegxalError):
    pass


@dataclass(frozen=True)
class SelectionDecision:
    sample_id: str
    dice: float
    theta: float
    accepted: bool
    cycle: int = 0

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "dice": self.dice, "theta": self.theta,
                "accepted": self.accepted, "cycle": self.cycle}


def dice(a: LabelMask, b: LabelMask) -> float:
    """Macro similarity: per-class 2|A∩B| / (|A|+|B|), averaged over the
    classes present in either mask. Ignored pixels drop out of both sets."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"masks {a.shape} vs {b.shape}")
    if a.num_classes != b.num_classes:
        raise ShapeMismatchError(
            f"class counts differ: {a.num_classes} vs {b.num_classes}")
    keep = (a.labels != IGNORE) & (b.labels != IGNORE)
    av, bv = a.labels[keep], b.labels[keep]
    classes = np.union1d(np.unique(av), np.unique(bv))
    if classes.size == 0:
        return 1.0  # vacuous agreement: nothing to compare
    scores = []
    for c in classes:
        in_a, in_b = av == c, bv == c
        denom = int(in_a.sum()) + int(in_b.sum())
        scores.append(2.0 * int((in_a & in_b).sum()) / denom)
    return float(np.mean(scores))


def select(
    batch: list[tuple[Sample, LabelMask, AnnotationRecord]],
    theta: float,
    pool: SamplePool,
    cycle: int = 0,
    invert: bool = False,
) -> tuple[list[SelectionDecision], dict[str, Sample]]:
    """Gate each annotated candidate on its similarity score.

    Accepted samples move to the labeled pool carrying the corrected mask
    as their training label; rejected ones return to the unlabeled pool.
    The candidate pool entries for the batch are consumed either way.
    Returns the decisions plus the replacement Sample objects.
    """
    for sample, _, _ in batch:
        if sample.id not in pool.candidate:
            raise SampleNotCandidateError(f"sample {sample.id} is not in the candidate pool")
    decisions = []
    updated: dict[str, Sample] = {}
    for sample, pred_argmax, record in batch:
        d = dice(pred_argmax, record.corrected)
        accepted = (d < theta) if invert else (d >= theta)
        decisions.append(SelectionDecision(sample.id, d, theta, accepted, cycle))
        pool.candidate.discard(sample.id)
        if accepted:
            pool.labeled.add(sample.id)
            updated[sample.id] = sample.with_gt(record.corrected).with_tag("labeled")
        else:
            pool.unlabeled.add(sample.id)
            updated[sample.id] = sample.with_tag("unlabeled")
    pool.audit()
    return decisions, updated
