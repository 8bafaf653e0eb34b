"""The active-learning loop: score, annotate, gate, retrain, evaluate.

Each cycle draws a random scoring subset from the unlabeled pool, ranks it
by the configured strategy (fused error-mask score, mean entropy, or not
at all for the random baseline), sends the top slice to the oracle, gates
admissions on the similarity threshold, retrains warm-started and
evaluates on the validation split. Machine-oracle runs are bit
reproducible for a fixed seed and config.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import ALConfig, LabelMask, Sample, SamplePool, SegxalError, deserialize_pool, serialize_pool
from .data import initial_split, load_cityscapes_dir, load_synthetic_dataset, make_synthetic_dataset
from .entropy import entropy_map
from .fusion import extract_candidates, fuse
from .metrics import MetricsReport, compute_metrics
from .model import ModelConfig, UNetSegmenter
from .oracle import AnnotationRecord, machine_annotate
from .pngio import load_label_png, save_label_png
from .proximity import DepthProvider, prox_gradcam
from .queueing import TicketQueue
from .selection import select

STRATEGIES = ("segxal", "random", "entropy_only")
ORACLE_MODES = ("machine", "human")
DEPTH_VARIANTS = ("synthetic", "midas_files", "dinov2_files")


class BudgetExhaustedError(SegxalError):
    pass


class PendingHumanAnnotations(SegxalError):
    def __init__(self, remaining: list[str]):
        super().__init__(f"waiting on human annotations for {len(remaining)} samples")
        self.remaining = remaining


class ResumeSchemaError(SegxalError):
    pass


@dataclass
class ALState:
    cycle: int
    pool: SamplePool
    config: ALConfig
    strategy: str
    oracle_mode: str
    depth_variant: str
    per_cycle_metrics: list[MetricsReport] = field(default_factory=list)
    model_checkpoint_ref: str | None = None
    queried_total: int = 0
    pending_human: tuple[str, ...] = ()
    recently_rejected: tuple[str, ...] = ()  # skipped for one cycle's ranking
    finished: bool = False

    def to_dict(self) -> dict:
        return {
            "schema": "segxal/1",
            "cycle": self.cycle,
            "pool": json.loads(serialize_pool(self.pool).decode("utf-8")),
            "config": self.config.to_dict(),
            "strategy": self.strategy,
            "oracle_mode": self.oracle_mode,
            "depth_variant": self.depth_variant,
            "per_cycle_metrics": [m.to_dict() for m in self.per_cycle_metrics],
            "model_checkpoint_ref": self.model_checkpoint_ref,
            "queried_total": self.queried_total,
            "pending_human": list(self.pending_human),
            "recently_rejected": list(self.recently_rejected),
            "finished": self.finished,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ALState":
        if d.get("schema") != "segxal/1":
            raise ResumeSchemaError(f"state schema {d.get('schema')!r}, expected segxal/1")
        pool = deserialize_pool(json.dumps(d["pool"]).encode("utf-8"))
        return cls(
            cycle=d["cycle"],
            pool=pool,
            config=ALConfig.from_dict(d["config"]),
            strategy=d["strategy"],
            oracle_mode=d["oracle_mode"],
            depth_variant=d["depth_variant"],
            per_cycle_metrics=[MetricsReport.from_dict(m) for m in d["per_cycle_metrics"]],
            model_checkpoint_ref=d.get("model_checkpoint_ref"),
            queried_total=d.get("queried_total", 0),
            pending_human=tuple(d.get("pending_human", ())),
            recently_rejected=tuple(d.get("recently_rejected", ())),
            finished=d.get("finished", False),
        )


@dataclass(frozen=True)
class ExperimentConfig:
    al: ALConfig
    model: ModelConfig
    dataset: dict
    strategy: str = "segxal"
    oracle_mode: str = "machine"
    depth_variant: str = "synthetic"
    depth_dir: str | None = None
    machine_oracle_mode: str = "ground_truth"
    run_name: str = "run"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.oracle_mode not in ORACLE_MODES:
            raise ValueError(f"unknown oracle mode {self.oracle_mode!r}")
        if self.depth_variant not in DEPTH_VARIANTS:
            raise ValueError(f"unknown depth variant {self.depth_variant!r}")

    def to_dict(self) -> dict:
        return {
            "schema": "segxal/1",
            "al": self.al.to_dict(),
            "model": self.model.to_dict(),
            "dataset": self.dataset,
            "strategy": self.strategy,
            "oracle_mode": self.oracle_mode,
            "depth_variant": self.depth_variant,
            "depth_dir": self.depth_dir,
            "machine_oracle_mode": self.machine_oracle_mode,
            "run_name": self.run_name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            al=ALConfig.from_dict(d["al"]),
            model=ModelConfig.from_dict(d["model"]),
            dataset=d["dataset"],
            strategy=d.get("strategy", "segxal"),
            oracle_mode=d.get("oracle_mode", "machine"),
            depth_variant=d.get("depth_variant", "synthetic"),
            depth_dir=d.get("depth_dir"),
            machine_oracle_mode=d.get("machine_oracle_mode", "ground_truth"),
            run_name=d.get("run_name", "run"),
        )


def load_dataset(dataset: dict) -> tuple[list[Sample], list[Sample]]:
    """Materialize (train, val) sample lists from a dataset config block."""
    kind = dataset.get("kind", "synthetic")
    if kind == "synthetic":
        train, _ = make_synthetic_dataset(
            dataset["n_train"], dataset["width"], dataset["height"],
            dataset["num_classes"], dataset["seed"], dataset.get("max_objects", 4))
        val, _ = make_synthetic_dataset(
            dataset["n_val"], dataset["width"], dataset["height"],
            dataset["num_classes"], dataset["seed"] + 1, dataset.get("max_objects", 4))
        return train, val
    if kind == "synthetic_dir":
        return (load_synthetic_dataset(dataset["train_dir"]),
                load_synthetic_dataset(dataset["val_dir"]))
    if kind == "cityscapes":
        size = tuple(dataset.get("size", (64, 128)))
        return (load_cityscapes_dir(dataset["root"], "train", size),
                load_cityscapes_dir(dataset["root"], "val", size))
    raise ValueError(f"unknown dataset kind {kind!r}")


def build_depth_provider(experiment: ExperimentConfig) -> DepthProvider:
    if experiment.depth_variant == "synthetic":
        return DepthProvider("synthetic_gt")
    kind = "file_midas" if experiment.depth_variant == "midas_files" else "file_dinov2"
    return DepthProvider(kind, experiment.depth_dir)


class ActiveLearningLoop:
    """Single-writer owner of the pool, the model and the run directory."""

    def __init__(self, experiment: ExperimentConfig, run_dir: str | Path | None = None,
                 train_samples: list[Sample] | None = None,
                 val_samples: list[Sample] | None = None,
                 queue: TicketQueue | None = None):
        self.experiment = experiment
        self.al = experiment.al
        if train_samples is None or val_samples is None:
            train_samples, val_samples = load_dataset(experiment.dataset)
        self.samples: dict[str, Sample] = {s.id: s for s in train_samples}
        self.val_samples = val_samples
        self.depth_provider = build_depth_provider(experiment)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.queue = queue
        if experiment.oracle_mode == "human" and queue is None and self.run_dir is not None:
            self.queue = TicketQueue(self.run_dir)

        pool = initial_split(train_samples, self.al)
        for sid in pool.labeled:
            self.samples[sid] = self.samples[sid].with_tag("labeled")
        self.state = ALState(
            cycle=0, pool=pool, config=self.al,
            strategy=experiment.strategy, oracle_mode=experiment.oracle_mode,
            depth_variant=experiment.depth_variant)
        self.model = UNetSegmenter.from_config(experiment.model, warm_start=True)
        self._initial_trained = False
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "config.json").write_text(
                json.dumps(experiment.to_dict(), indent=2, sort_keys=True))
            self._persist_state()

    # -- plumbing -------------------------------------------------------------

    @property
    def pool(self) -> SamplePool:
        return self.state.pool

    def _query_size(self) -> int:
        n_total = len(self.samples)
        n = max(1, int(round(self.al.query_fraction_per_cycle * n_total)))
        if self.al.budget_n > 0:
            n = min(n, self.al.budget_n - self.state.queried_total)
        return min(n, len(self.pool.unlabeled))

    def _labeled_samples(self) -> list[Sample]:
        return [self.samples[sid] for sid in sorted(self.pool.labeled)]

    def _retrain(self) -> None:
        self.model.fit_samples(self._labeled_samples())

    def _cycle_dir(self, cycle: int) -> Path | None:
        if self.run_dir is None:
            return None
        d = self.run_dir / f"cycle_{cycle:04d}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _persist_state(self) -> None:
        if self.run_dir is None:
            return
        tmp = self.run_dir / "state.json.tmp"
        tmp.write_text(json.dumps(self.state.to_dict(), indent=2, sort_keys=True))
        tmp.replace(self.run_dir / "state.json")

    def _persist_cycle(self, cycle: int, report: MetricsReport, decisions: list[dict]) -> None:
        cdir = self._cycle_dir(cycle)
        if cdir is None:
            return
        doc = report.to_dict()
        doc.pop("wall_time")  # timing varies run to run; keep metrics.json reproducible
        (cdir / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        with open(cdir / "decisions.jsonl", "w") as f:
            for row in decisions:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        self.model.save_checkpoint(cdir / "checkpoint.zip")
        self.state.model_checkpoint_ref = f"cycle_{cycle:04d}/checkpoint.zip"

    # -- the loop -------------------------------------------------------------

    def start(self) -> None:
        """Train the initial model on the seed labeled pool."""
        if not self._initial_trained:
            warmup = self.experiment.model.initial_epochs or None
            self.model.fit_samples(self._labeled_samples(), epochs=warmup)
            self._initial_trained = True

    def run_cycle(self) -> MetricsReport:
        if self.state.cycle >= self.al.num_cycles:
            raise SegxalError("cycle limit reached")
        if not self.pool.labeled:
            raise SegxalError("labeled pool is empty")
        self.start()
        cycle = self.state.cycle + 1
        if self.state.pending_human:
            return self._finish_human_cycle(cycle)

        if self.al.budget_n > 0 and self.state.queried_total >= self.al.budget_n:
            raise BudgetExhaustedError(
                f"budget {self.al.budget_n} exhausted after {self.state.queried_total} queries")
        n_query = self._query_size()
        rng = np.random.default_rng([self.al.seed, 1009, cycle])
        subset = self._draw_subset(rng, n_query)

        if self.experiment.strategy == "random":
            decisions = self._label_directly(subset[:n_query], cycle, strategy="random")
        elif self.experiment.strategy == "entropy_only":
            scored = []
            for sid in subset:
                _, stats = entropy_map(self.model.predict_probs(self.samples[sid].image))
                scored.append((sid, stats.mean))
            scored.sort(key=lambda t: (-t[1], t[0]))
            decisions = self._label_directly(
                [sid for sid, _ in scored[:n_query]], cycle, strategy="entropy_only",
                scores=dict(scored))
        else:
            decisions = self._segxal_step(subset, n_query, cycle)
            if decisions is None:  # suspended awaiting the human oracle
                raise PendingHumanAnnotations(list(self.state.pending_human))
        return self._close_cycle(cycle, decisions)

    def _draw_subset(self, rng: np.random.Generator, n_query: int) -> list[str]:
        ids = sorted(self.pool.unlabeled)
        if self.experiment.strategy == "random":
            k = n_query
        else:
            k = min(len(ids), self.al.candidate_pool_factor * n_query)
        pick = rng.choice(len(ids), size=min(k, len(ids)), replace=False)
        return [ids[i] for i in pick]

    def _label_directly(self, chosen: list[str], cycle: int, strategy: str,
                        scores: dict[str, float] | None = None) -> list[dict]:
        """Baseline acquisition: reveal the true labels of the chosen samples."""
        decisions = []
        for sid in chosen:
            self.pool.unlabeled.discard(sid)
            self.pool.labeled.add(sid)
            self.samples[sid] = self.samples[sid].with_tag("labeled")
            self.state.queried_total += 1
            row = {"sample_id": sid, "accepted": True, "strategy": strategy, "cycle": cycle}
            if scores is not None:
                row["score"] = scores[sid]
            decisions.append(row)
        self.pool.audit()
        return decisions

    def _segxal_step(self, subset: list[str], n_query: int, cycle: int) -> list[dict] | None:
        al = self.al
        # one-cycle cooldown: a sample the gate just rejected would rank top
        # again while still unlearnable, burning the query budget on retries
        cooled = [sid for sid in subset if sid not in self.state.recently_rejected]
        if len(cooled) >= n_query:
            subset = cooled
        artifacts = {}
        for sid in subset:
            s = self.samples[sid]
            probs = self.model.predict_probs(s.image)
            ent, _ = entropy_map(probs)
            pg = prox_gradcam(
                self.model, s, self.depth_provider, al.depth_quantile_tau,
                min_area_fraction=al.min_area_fraction, z_mode=al.z_mode,
                hard=al.hard_proximity)
            eem = fuse(pg, ent, al.fusion_alpha, al.fusion_beta)
            prompts = extract_candidates(
                eem, sid, al.prompt_percentile, al.prompt_max_regions, al.prompt_min_px)
            artifacts[sid] = (probs, eem, prompts, float(eem.map.values.mean()))
        ranked = sorted(subset, key=lambda sid: (-artifacts[sid][3], sid))
        chosen = [sid for sid in ranked if artifacts[sid][2]][:n_query]

        for sid in chosen:
            self.pool.unlabeled.discard(sid)
            self.pool.candidate.add(sid)
            self.samples[sid] = self.samples[sid].with_tag("candidate")
        self.pool.audit()
        self._export_candidates(cycle, chosen, artifacts)

        if self.experiment.oracle_mode == "human":
            for sid in chosen:
                s = self.samples[sid]
                pred = LabelMask(artifacts[sid][0].argmax(), self.model.num_classes)
                self.queue.enqueue(s, artifacts[sid][2], artifacts[sid][1], pred, cycle)
                self.state.queried_total += 1
            self.state.pending_human = tuple(chosen)
            self._persist_state()
            return None

        batch = []
        for sid in chosen:
            s = self.samples[sid]
            pred = LabelMask(artifacts[sid][0].argmax(), self.model.num_classes)
            record = machine_annotate(
                s, artifacts[sid][2], pred, self.experiment.machine_oracle_mode)
            self.state.queried_total += 1
            batch.append((s, pred, record))
        return self._apply_selection(batch, cycle)

    def _apply_selection(self, batch, cycle: int) -> list[dict]:
        decisions, updated = select(
            batch, self.al.dice_threshold_theta, self.pool, cycle=cycle,
            invert=self.al.invert_selection)
        self.samples.update(updated)
        self.state.recently_rejected = tuple(
            d.sample_id for d in decisions if not d.accepted)
        if self.run_dir is not None:
            cdir = self._cycle_dir(cycle)
            corrected_dir = cdir / "corrected"
            corrected_dir.mkdir(exist_ok=True)
            for d in decisions:
                if d.accepted:
                    save_label_png(self.samples[d.sample_id].gt,
                                   corrected_dir / f"{d.sample_id}.png")
        return [d.to_dict() for d in decisions]

    def _export_candidates(self, cycle: int, chosen: list[str], artifacts) -> None:
        cdir = self._cycle_dir(cycle)
        if cdir is None:
            return
        from .fusion import export_eem
        (cdir / "eem").mkdir(exist_ok=True)
        (cdir / "prompts").mkdir(exist_ok=True)
        for sid in chosen:
            _, eem, prompts, _ = artifacts[sid]
            export_eem(eem, prompts, cdir / "eem" / f"{sid}.png",
                       cdir / "prompts" / f"{sid}.json", self.al.prompt_percentile)

    def _finish_human_cycle(self, cycle: int) -> MetricsReport:
        pending = list(self.state.pending_human)
        submitted = self.queue.collect_submitted(cycle, resolve=False)
        missing = [sid for sid in pending if sid not in submitted]
        if missing:
            raise PendingHumanAnnotations(missing)
        records = self.queue.collect_submitted(cycle, resolve=True)
        tickets = {t.sample_id: t for t in self.queue.all_tickets() if t.cycle == cycle}
        batch = []
        for sid in pending:
            from .core import rle_decode_labels
            t = tickets[sid]
            pred = LabelMask(rle_decode_labels(t.initial_labels_rle, t.shape), t.num_classes)
            batch.append((self.samples[sid], pred, records[sid]))
        decisions = self._apply_selection(batch, cycle)
        self.state.pending_human = ()
        return self._close_cycle(cycle, decisions)

    def _close_cycle(self, cycle: int, decisions: list[dict]) -> MetricsReport:
        t0 = time.perf_counter()
        self._retrain()
        report = compute_metrics(self.model, self.val_samples,
                                 samples_labeled=len(self.pool.labeled))
        report.wall_time = time.perf_counter() - t0
        self.state.per_cycle_metrics.append(report)
        self.state.cycle = cycle
        self._persist_cycle(cycle, report, decisions)
        self._persist_state()
        return report

    def exhausted(self) -> bool:
        if self.state.cycle >= self.al.num_cycles:
            return True
        if not self.pool.unlabeled and not self.state.pending_human:
            return True
        if self.al.budget_n > 0 and self.state.queried_total >= self.al.budget_n \
                and not self.state.pending_human:
            return True
        return False

    def run(self) -> list[MetricsReport]:
        """Run cycles until the budget, the cycle limit or the pool runs out."""
        self.start()
        while not self.exhausted():
            self.run_cycle()
        self.state.finished = True
        self._persist_state()
        return self.state.per_cycle_metrics

    # -- resume ----------------------------------------------------------------

    @classmethod
    def resume(cls, run_dir: str | Path, experiment: ExperimentConfig | None = None,
               train_samples: list[Sample] | None = None,
               val_samples: list[Sample] | None = None) -> "ActiveLearningLoop":
        run_dir = Path(run_dir)
        state_path = run_dir / "state.json"
        if not state_path.exists():
            raise ResumeSchemaError(f"no state.json under {run_dir}")
        state = ALState.from_dict(json.loads(state_path.read_text()))
        if experiment is None:
            experiment = ExperimentConfig.from_dict(
                json.loads((run_dir / "config.json").read_text()))
        loop = cls(experiment, run_dir=None, train_samples=train_samples,
                   val_samples=val_samples,
                   queue=TicketQueue(run_dir) if experiment.oracle_mode == "human" else None)
        loop.run_dir = run_dir
        loop.state = state
        # replay corrected masks so retraining sees what past cycles admitted
        for k in range(1, state.cycle + (2 if state.pending_human else 1)):
            corrected_dir = run_dir / f"cycle_{k:04d}" / "corrected"
            if corrected_dir.exists():
                for png in sorted(corrected_dir.glob("*.png")):
                    sid = png.stem
                    gt = load_label_png(png, loop.model.num_classes)
                    loop.samples[sid] = loop.samples[sid].with_gt(gt).with_tag("labeled")
        for sid in state.pool.labeled:
            loop.samples[sid] = loop.samples[sid].with_tag("labeled")
        for sid in state.pool.candidate:
            loop.samples[sid] = loop.samples[sid].with_tag("candidate")
        if state.model_checkpoint_ref:
            est = UNetSegmenter.load_checkpoint(run_dir / state.model_checkpoint_ref)
            est.warm_start = True
            loop.model = est
            loop._initial_trained = True
        elif state.cycle > 0 or state.pending_human:
            raise ResumeSchemaError("state references no model checkpoint")
        return loop


def run_ablation(
    base: ExperimentConfig, variants: dict[str, dict], seeds: list[int],
    out_dir: str | Path | None = None,
) -> list[dict]:
    """One full run per (variant, seed); returns and optionally writes a table.

    Variant overrides may patch the loop config (``al``), the strategy or
    the oracle mode; identical seeds are used across variants.
    """
    rows = []
    for name, overrides in variants.items():
        for seed in seeds:
            al = replace(base.al, seed=seed, **overrides.get("al", {}))
            dataset = dict(base.dataset)
            exp = ExperimentConfig(
                al=al, model=replace(base.model, seed=seed), dataset=dataset,
                strategy=overrides.get("strategy", base.strategy),
                oracle_mode=base.oracle_mode,
                depth_variant=overrides.get("depth_variant", base.depth_variant),
                depth_dir=base.depth_dir,
                machine_oracle_mode=overrides.get(
                    "machine_oracle_mode", base.machine_oracle_mode),
                run_name=f"{base.run_name}-{name}-s{seed}")
            run_path = None
            if out_dir is not None:
                run_path = Path(out_dir) / exp.run_name
            loop = ActiveLearningLoop(exp, run_dir=run_path)
            reports = loop.run()
            rows.append({
                "variant": name,
                "seed": seed,
                "miou_per_cycle": [m.miou for m in reports],
                "final_miou": reports[-1].miou if reports else 0.0,
                "samples_labeled": reports[-1].samples_labeled if reports else 0,
            })
    if out_dir is not None:
        write_ablation_table(rows, Path(out_dir))
    return rows


def write_ablation_table(rows: list[dict], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    n_cycles = max((len(r["miou_per_cycle"]) for r in rows), default=0)
    with open(out_dir / "ablation.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "seed"]
                        + [f"miou_cycle_{i + 1}" for i in range(n_cycles)]
                        + ["final_miou", "samples_labeled"])
        for r in rows:
            mious = list(r["miou_per_cycle"]) + [""] * (n_cycles - len(r["miou_per_cycle"]))
            writer.writerow([r["variant"], r["seed"]] + mious
                            + [r["final_miou"], r["samples_labeled"]])
