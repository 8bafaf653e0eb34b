"""Annotation oracles: simulated machine corrections and the human queue.

The machine oracle rewrites the prompted regions from ground truth (its
default, information-bearing mode) or simply echoes the model's own
prediction (an ablation mode in which the downstream similarity gate
becomes vacuous). Human annotation goes through the ticket queue served
over HTTP; this module only enqueues and parses the results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import IGNORE, LabelMask, Sample, SegxalError, rle_decode_labels, rle_encode_labels
from .fusion import CandidatePrompt, EEMask

MACHINE_MODES = ("ground_truth", "model_argmax")


class MissingGtError(SegxalError):
    pass


@dataclass(frozen=True)
class AnnotationRecord:
    sample_id: str
    corrected: LabelMask
    regions_covered: tuple[int, ...] = ()
    source: str = "machine_pseudolabel"  # or "human"
    annotator_id: str | None = None
    elapsed: float = 0.0

    def to_dict(self) -> dict:
        return {
            "schema": "segxal/1",
            "sample_id": self.sample_id,
            "labels_rle": rle_encode_labels(self.corrected.labels),
            "shape": list(self.corrected.shape),
            "num_classes": self.corrected.num_classes,
            "regions_covered": list(self.regions_covered),
            "source": self.source,
            "annotator_id": self.annotator_id,
            "elapsed": self.elapsed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        mask = LabelMask(
            rle_decode_labels(d["labels_rle"], (d["shape"][0], d["shape"][1])),
            num_classes=d["num_classes"],
        )
        return cls(
            sample_id=d["sample_id"],
            corrected=mask,
            regions_covered=tuple(d.get("regions_covered", ())),
            source=d.get("source", "machine_pseudolabel"),
            annotator_id=d.get("annotator_id"),
            elapsed=d.get("elapsed", 0.0),
        )


def machine_annotate(
    sample: Sample,
    prompts: list[CandidatePrompt],
    prediction: LabelMask,
    mode: str = "ground_truth",
) -> AnnotationRecord:
    """Simulated oracle correction over the prompted regions.

    ground_truth mode copies the true labels inside every prompt region and
    the model argmax everywhere else; model_argmax mode returns the argmax
    unchanged (similarity against it is identically 1).
    """
    if mode not in MACHINE_MODES:
        raise ValueError(f"unknown machine oracle mode {mode!r}")
    if not prompts:
        raise ValueError("machine_annotate needs at least one prompt")
    corrected = prediction.labels.copy()
    if mode == "ground_truth":
        if sample.gt is None:
            raise MissingGtError(f"sample {sample.id} has no gt for ground_truth mode")
        shape = prediction.shape
        for p in prompts:
            region = p.mask(shape)
            corrected[region] = sample.gt.labels[region]
    return AnnotationRecord(
        sample_id=sample.id,
        corrected=LabelMask(corrected, prediction.num_classes),
        regions_covered=tuple(p.rank for p in prompts),
        source="machine_pseudolabel",
    )


def enqueue_for_human(queue, sample: Sample, prompts: list[CandidatePrompt],
                      eem: EEMask, prediction: LabelMask, cycle: int):
    """Create a pending ticket with its review assets; returns the ticket."""
    return queue.enqueue(sample, prompts, eem, prediction, cycle)
