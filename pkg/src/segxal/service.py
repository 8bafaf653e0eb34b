"""HTTP/JSON annotation service over a run directory.

Exposes the human-oracle queue, ticket claim/submit with leases, read-only
asset serving and run telemetry. The service holds no state beyond the
persisted queue file and the run directory, so it survives restarts.
"""

from __future__ import annotations

import json
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse
from pydantic import BaseModel, Field

from .geometry import GeometryError
from .queueing import (ClaimConflictError, DEFAULT_LEASE_SECONDS, LeaseExpiredError,
                       TicketQueue, UnknownTicketError)


class ClaimBody(BaseModel):
    annotator_id: str = Field(min_length=1)


class AnnotationBody(BaseModel):
    annotator_id: str = Field(min_length=1)
    edits: list[dict]
    elapsed: float = 0.0


def create_app(run_dir: str | Path, cors_origin: str = "*",
               lease_seconds: float = DEFAULT_LEASE_SECONDS, clock=None) -> FastAPI:
    run_dir = Path(run_dir)
    app = FastAPI(title="segxal annotation service")
    app.add_middleware(
        CORSMiddleware, allow_origins=[cors_origin], allow_methods=["*"],
        allow_headers=["*"])
    kwargs = {"lease_seconds": lease_seconds}
    if clock is not None:
        kwargs["clock"] = clock
    queue = TicketQueue(run_dir, **kwargs)
    app.state.queue = queue
    app.state.run_dir = run_dir

    def load_state() -> dict:
        path = run_dir / "state.json"
        if not path.exists():
            raise HTTPException(status_code=503, detail="no active run in this directory")
        return json.loads(path.read_text())

    @app.get("/api/status")
    def status() -> dict:
        state = load_state()
        trend = [m["miou"] for m in state.get("per_cycle_metrics", [])]
        pool = state.get("pool", {})
        return {
            "schema": "segxal/1",
            "cycle": state.get("cycle", 0),
            "strategy": state.get("strategy"),
            "oracle_mode": state.get("oracle_mode"),
            "finished": state.get("finished", False),
            "miou_trend": trend,
            "pool_sizes": {k: len(pool.get(k, [])) for k in ("labeled", "unlabeled", "candidate")},
            "pending_tickets": queue.open_count(),
        }

    @app.get("/api/queue")
    def list_queue() -> list[dict]:
        load_state()  # 503 when the run directory is not initialized
        return [t.summary() for t in queue.list_open()]

    @app.post("/api/tickets/{ticket_id}/claim")
    def claim(ticket_id: str, body: ClaimBody) -> dict:
        try:
            return queue.claim(ticket_id, body.annotator_id).summary()
        except UnknownTicketError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except ClaimConflictError as e:
            raise HTTPException(status_code=409, detail=str(e))

    @app.post("/api/tickets/{ticket_id}/annotation")
    def annotate(ticket_id: str, body: AnnotationBody) -> dict:
        try:
            ticket, checksum = queue.submit(
                ticket_id, body.annotator_id, body.edits, body.elapsed)
        except UnknownTicketError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except LeaseExpiredError as e:
            raise HTTPException(status_code=410, detail=str(e))
        except ClaimConflictError as e:
            raise HTTPException(status_code=409, detail=str(e))
        except GeometryError as e:
            raise HTTPException(status_code=422, detail=str(e))
        return {"ticket": ticket.summary(), "corrected_checksum": checksum}

    @app.get("/api/assets/{asset_path:path}")
    def asset(asset_path: str):
        base = (run_dir / "assets").resolve()
        target = (run_dir / asset_path).resolve()
        if not str(target).startswith(str(base)):
            raise HTTPException(status_code=403, detail="asset path escapes the run directory")
        if not target.exists():
            raise HTTPException(status_code=404, detail=f"no asset {asset_path}")
        media = "image/png" if target.suffix == ".png" else "application/json"
        return FileResponse(target, media_type=media)

    @app.exception_handler(GeometryError)
    def geometry_handler(request: Request, exc: GeometryError):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    return app
