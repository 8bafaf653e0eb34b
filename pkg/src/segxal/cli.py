"""Command-line entry point: dataset generation, experiment runs, reports
and the annotation service.

Exit codes: 2 unwritable output, 3 missing depth coverage, 4 resume schema
mismatch, 5 missing/empty run directory, 6 port in use.
"""

from __future__ import annotations

import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import click

from .core import ALConfig
from .data import export_synthetic_dataset, make_synthetic_dataset
from .model import ModelConfig
from .orchestrator import (ActiveLearningLoop, ExperimentConfig, PendingHumanAnnotations,
                           ResumeSchemaError, build_depth_provider, load_dataset)

EXIT_UNWRITABLE = 2
EXIT_DEPTH_COVERAGE = 3
EXIT_RESUME_SCHEMA = 4
EXIT_NO_RUN = 5
EXIT_PORT_IN_USE = 6


def _run_root() -> Path:
    return Path(os.environ.get("SEGXAL_RUN_ROOT", "runs"))


@click.group()
def main() -> None:
    """Active-learning segmentation workbench."""


@main.command("gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n", default=10, show_default=True)
@click.option("--width", default=128, show_default=True)
@click.option("--height", default=64, show_default=True)
@click.option("--classes", "num_classes", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--max-objects", default=4, show_default=True)
def gen_data(out_dir, n, width, height, num_classes, seed, max_objects) -> None:
    """Write a synthetic dataset (images, labels, depth, manifest)."""
    samples, specs = make_synthetic_dataset(n, width, height, num_classes, seed, max_objects)
    try:
        manifest = export_synthetic_dataset(out_dir, samples, specs)
    except (OSError, PermissionError) as e:
        click.echo(f"cannot write to {out_dir}: {e}", err=True)
        sys.exit(EXIT_UNWRITABLE)
    click.echo(f"wrote {len(samples)} samples, manifest at {manifest}")


def _load_experiment(config_path: str, overrides: dict) -> ExperimentConfig:
    doc = json.loads(Path(config_path).read_text())
    exp = ExperimentConfig(
        al=ALConfig.from_dict(doc.get("al", {})),
        model=ModelConfig.from_dict(doc.get("model", {})),
        dataset=doc["dataset"],
        strategy=doc.get("strategy", "segxal"),
        oracle_mode=doc.get("oracle_mode", "machine"),
        depth_variant=doc.get("depth_variant", "synthetic"),
        depth_dir=doc.get("depth_dir"),
        machine_oracle_mode=doc.get("machine_oracle_mode", "ground_truth"),
        run_name=doc.get("run_name", Path(config_path).stem),
    )
    clean = {k: v for k, v in overrides.items() if v is not None}
    if clean:
        exp = replace(exp, **clean)
    return exp


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--strategy", type=click.Choice(["segxal", "random", "entropy"]), default=None)
@click.option("--oracle", type=click.Choice(["machine", "human"]), default=None)
@click.option("--depth", type=click.Choice(["synthetic", "midas_files", "dinov2_files"]), default=None)
@click.option("--resume", "resume_dir", type=click.Path(), default=None)
@click.option("--run-name", default=None)
@click.option("--service-url", default="http://127.0.0.1:8008",
              show_default=True, help="annotation service to check in human mode")
@click.option("--poll-seconds", default=2.0, show_default=True)
def run(config_path, strategy, oracle, depth, resume_dir, run_name, service_url, poll_seconds) -> None:
    """Run the active-learning loop until its termination condition."""
    if resume_dir is not None:
        try:
            loop = ActiveLearningLoop.resume(resume_dir)
        except ResumeSchemaError as e:
            click.echo(f"cannot resume: {e}", err=True)
            sys.exit(EXIT_RESUME_SCHEMA)
        if loop.state.finished:
            click.echo("run already finished; nothing to do")
            return
    else:
        overrides = {
            "strategy": {"entropy": "entropy_only"}.get(strategy, strategy),
            "oracle_mode": oracle,
            "depth_variant": depth,
            "run_name": run_name,
        }
        exp = _load_experiment(config_path, overrides)
        if exp.depth_variant in ("midas_files", "dinov2_files"):
            train, val = load_dataset(exp.dataset)
            provider = build_depth_provider(exp)
            missing = provider.covers([s.id for s in train], {s.id: s for s in train})
            if missing:
                click.echo("missing depth files for ids: " + ", ".join(missing[:10])
                           + (" ..." if len(missing) > 10 else ""), err=True)
                sys.exit(EXIT_DEPTH_COVERAGE)
            loop = ActiveLearningLoop(exp, run_dir=_run_root() / exp.run_name,
                                      train_samples=train, val_samples=val)
        else:
            loop = ActiveLearningLoop(exp, run_dir=_run_root() / exp.run_name)
        if exp.oracle_mode == "human" and not _service_reachable(service_url):
            click.echo(
                f"human oracle needs the annotation service; none at {service_url}.\n"
                f"start it with: segxal serve --run {loop.run_dir} --port 8008", err=True)
            sys.exit(1)

    while not loop.exhausted():
        try:
            report = loop.run_cycle()
        except PendingHumanAnnotations as e:
            click.echo(f"waiting for {len(e.remaining)} human annotations ...")
            time.sleep(poll_seconds)
            continue
        click.echo(f"cycle {loop.state.cycle}: mIoU={report.miou:.4f} "
                   f"labeled={report.samples_labeled}")
    loop.state.finished = True
    loop._persist_state()
    click.echo(f"done: {loop.run_dir}")


def _service_reachable(url: str) -> bool:
    import urllib.error
    import urllib.request
    try:
        with urllib.request.urlopen(url.rstrip("/") + "/api/status", timeout=2) as resp:
            return resp.status in (200, 503)
    except urllib.error.HTTPError as e:
        return e.code == 503
    except Exception:
        return False


@main.command("report")
@click.option("--run", "run_dir", required=True, type=click.Path())
@click.option("--format", "fmt", type=click.Choice(["csv", "json", "md"]), default="md",
              show_default=True)
def report(run_dir, fmt) -> None:
    """Emit the per-cycle metrics table of a finished or partial run."""
    run_dir = Path(run_dir)
    cycles = sorted(run_dir.glob("cycle_*/metrics.json"))
    if not cycles:
        click.echo(f"no cycle metrics under {run_dir}", err=True)
        sys.exit(EXIT_NO_RUN)
    rows = []
    class_ids: list[int] = []
    for path in cycles:
        doc = json.loads(path.read_text())
        cyc = int(path.parent.name.split("_")[1])
        per_class = {int(k): v for k, v in doc["per_class_iou"].items()}
        class_ids = sorted(set(class_ids) | set(per_class))
        rows.append({"cycle": cyc, "per_class": per_class,
                     "miou": doc["miou"], "samples_labeled": doc["samples_labeled"]})
    header = ["cycle"] + [f"iou_class_{c}" for c in class_ids] + ["miou", "samples_labeled"]

    def row_values(r):
        return ([r["cycle"]]
                + [r["per_class"].get(c, "") for c in class_ids]
                + [r["miou"], r["samples_labeled"]])

    if fmt == "json":
        doc = [dict(zip(header, row_values(r))) for r in rows]
        click.echo(json.dumps(doc, indent=2, sort_keys=True))
    elif fmt == "csv":
        import csv as _csv
        import io
        buf = io.StringIO()
        w = _csv.writer(buf)
        w.writerow(header)
        for r in rows:
            w.writerow(row_values(r))
        click.echo(buf.getvalue().rstrip("\n"))
    else:
        click.echo("| " + " | ".join(header) + " |")
        click.echo("|" + "|".join(["---"] * len(header)) + "|")
        for r in rows:
            vals = ["" if v == "" else (f"{v:.4f}" if isinstance(v, float) else str(v))
                    for v in row_values(r)]
            click.echo("| " + " | ".join(vals) + " |")


@main.command("serve")
@click.option("--run", "run_dir", required=True, type=click.Path())
@click.option("--port", default=8008, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--cors-origin", default="*", show_default=True)
def serve(run_dir, port, host, cors_origin) -> None:
    """Serve the annotation queue and assets over HTTP; blocks until signal."""
    run_dir = Path(run_dir)
    if not run_dir.exists():
        click.echo(f"run directory {run_dir} does not exist", err=True)
        sys.exit(EXIT_NO_RUN)
    import uvicorn

    from .service import create_app
    app = create_app(run_dir, cors_origin=cors_origin)
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    except SystemExit as e:  # uvicorn exits 1 when the socket is taken
        if e.code:
            click.echo(f"cannot bind port {port}: in use?", err=True)
            sys.exit(EXIT_PORT_IN_USE)
    except OSError as e:
        click.echo(f"cannot bind port {port}: {e}", err=True)
        sys.exit(EXIT_PORT_IN_USE)


if __name__ == "__main__":
    main()
