"""Persistent annotation ticket queue shared by the loop and the service.

One JSON document per line in <run_dir>/queue.jsonl; every mutation
reloads the file, applies the change and atomically replaces it under an
advisory file lock, so a crashed process never leaves a torn queue and the
orchestrator and HTTP service can share it.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import IGNORE, LabelMask, Sample, SegxalError, rle_decode_labels, rle_encode_labels
from .data import class_palette
from .fusion import CandidatePrompt, EEMask
from .geometry import merge_edits
from .oracle import AnnotationRecord
from .pngio import save_heatmap_png, save_image_png

from PIL import Image as PILImage

TICKET_STATUSES = ("pending", "claimed", "submitted", "resolved")
DEFAULT_LEASE_SECONDS = 600.0

ASSET_NAMES = ("raw", "initial_seg", "eem", "prompts", "class_palette")


class DuplicateTicketError(SegxalError):
    pass


class ClaimConflictError(SegxalError):
    pass


class LeaseExpiredError(SegxalError):
    pass


class UnknownTicketError(SegxalError):
    pass


@dataclass
class Ticket:
    ticket_id: str
    sample_id: str
    cycle: int
    status: str = "pending"
    annotator_id: str | None = None
    lease_expiry: float | None = None
    asset_refs: dict[str, str] = field(default_factory=dict)
    top_score: float = 0.0
    initial_labels_rle: list = field(default_factory=list)
    shape: tuple[int, int] = (0, 0)
    num_classes: int = 0
    annotation: dict | None = None  # AnnotationRecord payload once submitted
    elapsed: float = 0.0

    def to_dict(self) -> dict:
        return {
            "ticket_id": self.ticket_id, "sample_id": self.sample_id,
            "cycle": self.cycle, "status": self.status,
            "annotator_id": self.annotator_id, "lease_expiry": self.lease_expiry,
            "asset_refs": self.asset_refs, "top_score": self.top_score,
            "initial_labels_rle": self.initial_labels_rle,
            "shape": list(self.shape), "num_classes": self.num_classes,
            "annotation": self.annotation, "elapsed": self.elapsed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ticket":
        d = dict(d)
        d["shape"] = tuple(d.get("shape", (0, 0)))
        return cls(**d)

    def summary(self) -> dict:
        return {
            "ticket_id": self.ticket_id, "sample_id": self.sample_id,
            "cycle": self.cycle, "status": self.status,
            "annotator_id": self.annotator_id, "lease_expiry": self.lease_expiry,
            "asset_refs": self.asset_refs, "top_score": self.top_score,
            "shape": list(self.shape), "num_classes": self.num_classes,
        }


def _corrected_checksum(labels: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(labels, dtype=np.uint8).tobytes()).hexdigest()


class TicketQueue:
    """Multi-producer / multi-consumer queue with per-ticket leases."""

    def __init__(self, run_dir: str | Path, lease_seconds: float = DEFAULT_LEASE_SECONDS,
                 clock=time.time):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.path = self.run_dir / "queue.jsonl"
        self.lock_path = self.run_dir / "queue.lock"
        self.lease_seconds = lease_seconds
        self.clock = clock

    # -- persistence --------------------------------------------------------

    def _load(self) -> list[Ticket]:
        if not self.path.exists():
            return []
        tickets = []
        for line in self.path.read_text().splitlines():
            if line.strip():
                tickets.append(Ticket.from_dict(json.loads(line)))
        return tickets

    def _store(self, tickets: list[Ticket]) -> None:
        tmp = self.path.with_suffix(".jsonl.tmp")
        tmp.write_text("".join(json.dumps(t.to_dict()) + "\n" for t in tickets))
        os.replace(tmp, self.path)

    def _mutate(self, fn):
        with open(self.lock_path, "w") as lockf:
            fcntl.flock(lockf, fcntl.LOCK_EX)
            try:
                tickets = self._load()
                self._expire_leases(tickets)
                result = fn(tickets)
                self._store(tickets)
                return result
            finally:
                fcntl.flock(lockf, fcntl.LOCK_UN)

    def _expire_leases(self, tickets: list[Ticket]) -> None:
        now = self.clock()
        for t in tickets:
            if t.status == "claimed" and t.lease_expiry is not None and now > t.lease_expiry:
                t.status = "pending"
                t.annotator_id = None
                t.lease_expiry = None

    # -- queue operations ----------------------------------------------------

    def enqueue(self, sample: Sample, prompts: list[CandidatePrompt], eem: EEMask,
                prediction: LabelMask, cycle: int) -> Ticket:
        asset_dir_rel = Path("assets")
        ticket_id = f"tk-{uuid.uuid4().hex[:12]}"
        refs = self._write_assets(ticket_id, sample, prompts, eem, prediction, asset_dir_rel)
        top_score = max((p.score for p in prompts), default=0.0)

        def op(tickets: list[Ticket]) -> Ticket:
            for t in tickets:
                if t.sample_id == sample.id and t.status != "resolved":
                    raise DuplicateTicketError(
                        f"sample {sample.id} already pending as ticket {t.ticket_id}")
            ticket = Ticket(
                ticket_id=ticket_id, sample_id=sample.id, cycle=cycle,
                asset_refs=refs, top_score=top_score,
                initial_labels_rle=rle_encode_labels(prediction.labels),
                shape=prediction.shape, num_classes=prediction.num_classes)
            tickets.append(ticket)
            return ticket

        return self._mutate(op)

    def _write_assets(self, ticket_id: str, sample: Sample, prompts, eem,
                      prediction: LabelMask, asset_dir_rel: Path) -> dict[str, str]:
        adir = self.run_dir / asset_dir_rel / ticket_id
        adir.mkdir(parents=True, exist_ok=True)
        palette = class_palette(prediction.num_classes)
        save_image_png(sample.image, adir / "raw.png")
        seg_rgb = palette[np.clip(prediction.labels, 0, prediction.num_classes - 1)]
        seg_rgb[prediction.labels == IGNORE] = (0, 0, 0)
        PILImage.fromarray(seg_rgb.astype(np.uint8), mode="RGB").save(adir / "initial_seg.png")
        save_heatmap_png(eem.map, adir / "eem.png")
        (adir / "prompts.json").write_text(json.dumps(
            {"sample_id": sample.id, "regions": [p.to_dict() for p in prompts]},
            sort_keys=True))
        (adir / "class_palette.json").write_text(json.dumps(
            {"palette": palette.tolist()}, sort_keys=True))
        rel = asset_dir_rel / ticket_id
        return {
            "raw": str(rel / "raw.png"),
            "initial_seg": str(rel / "initial_seg.png"),
            "eem": str(rel / "eem.png"),
            "prompts": str(rel / "prompts.json"),
            "class_palette": str(rel / "class_palette.json"),
        }

    def list_open(self) -> list[Ticket]:
        """Pending and claimed tickets, most informative first."""
        def op(tickets):
            open_t = [t for t in tickets if t.status in ("pending", "claimed")]
            return sorted(open_t, key=lambda t: -t.top_score)
        return self._mutate(op)

    def all_tickets(self) -> list[Ticket]:
        return self._mutate(lambda tickets: list(tickets))

    def get(self, ticket_id: str) -> Ticket:
        def op(tickets):
            for t in tickets:
                if t.ticket_id == ticket_id:
                    return t
            raise UnknownTicketError(f"no ticket {ticket_id}")
        return self._mutate(op)

    def claim(self, ticket_id: str, annotator_id: str) -> Ticket:
        def op(tickets):
            t = self._find(tickets, ticket_id)
            if t.status != "pending":
                raise ClaimConflictError(
                    f"ticket {ticket_id} is {t.status}, cannot claim")
            t.status = "claimed"
            t.annotator_id = annotator_id
            t.lease_expiry = self.clock() + self.lease_seconds
            return t
        return self._mutate(op)

    def submit(self, ticket_id: str, annotator_id: str, edits: list[dict],
               elapsed: float = 0.0) -> tuple[Ticket, str]:
        """Merge edits onto the initial segmentation; returns (ticket, checksum)."""
        def op(tickets):
            t = self._find(tickets, ticket_id)
            if t.status == "pending" and t.annotator_id is None:
                # previously claimed lease that expired is surfaced as 410
                raise LeaseExpiredError(f"ticket {ticket_id} lease expired")
            if t.status != "claimed":
                raise ClaimConflictError(f"ticket {ticket_id} is {t.status}, not claimed")
            if t.annotator_id != annotator_id:
                raise ClaimConflictError(
                    f"ticket {ticket_id} claimed by {t.annotator_id}, not {annotator_id}")
            if t.lease_expiry is not None and self.clock() > t.lease_expiry:
                raise LeaseExpiredError(f"ticket {ticket_id} lease expired")
            initial = rle_decode_labels(t.initial_labels_rle, t.shape)
            corrected = merge_edits(initial, edits, t.shape, t.num_classes)
            record = AnnotationRecord(
                sample_id=t.sample_id,
                corrected=LabelMask(corrected, t.num_classes),
                regions_covered=(),
                source="human",
                annotator_id=annotator_id,
                elapsed=elapsed,
            )
            t.annotation = record.to_dict()
            t.status = "submitted"
            t.elapsed = elapsed
            return t, _corrected_checksum(corrected)
        return self._mutate(op)

    def resolve(self, ticket_id: str) -> Ticket:
        def op(tickets):
            t = self._find(tickets, ticket_id)
            if t.status != "submitted":
                raise ClaimConflictError(f"ticket {ticket_id} is {t.status}, not submitted")
            t.status = "resolved"
            return t
        return self._mutate(op)

    def collect_submitted(self, cycle: int, resolve: bool = True) -> dict[str, AnnotationRecord]:
        """Records for every submitted ticket of the cycle, resolving them."""
        def op(tickets):
            out = {}
            for t in tickets:
                if t.cycle == cycle and t.status == "submitted" and t.annotation:
                    out[t.sample_id] = AnnotationRecord.from_dict(t.annotation)
                    if resolve:
                        t.status = "resolved"
            return out
        return self._mutate(op)

    def open_count(self, cycle: int | None = None) -> int:
        def op(tickets):
            return sum(
                1 for t in tickets
                if t.status in ("pending", "claimed")
                and (cycle is None or t.cycle == cycle))
        return self._mutate(op)

    @staticmethod
    def _find(tickets: list[Ticket], ticket_id: str) -> Ticket:
        for t in tickets:
            if t.ticket_id == ticket_id:
                return t
        raise UnknownTicketError(f"no ticket {ticket_id}")
