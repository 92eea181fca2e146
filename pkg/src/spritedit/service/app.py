"""FastAPI application exposing edit sessions to the companion UI.

Renders and sweeps are byte-for-byte the same as the CLI produces for the
same session, because both go through the same pipeline functions and the
same PNG cache. A single background worker runs stage A+B jobs; renders that
need the device while a job holds it get 503 with Retry-After.
"""

from __future__ import annotations

import base64
import binascii
import shutil
import threading
from pathlib import Path

from fastapi import FastAPI, HTTPException, Response

from .. import config as config_mod, imageio, pipeline, sprites, sr as sr_mod
from ..artifacts import load_bundle
from ..errors import IntegrityError
from ..pipeline import EditConfig, EditSession
from ..runtime import tune_for_small_models
from . import schemas
from .jobs import DeviceBusy, DeviceGate, JobQueue


class SessionStore:
    """Session directories under one root, plus per-render-key locks."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}

    def ids(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir()
                      if (p / "manifest.txt").exists())

    def path(self, session_id: str) -> Path:
        return self.root / session_id

    def load(self, session_id: str) -> EditSession:
        path = self.path(session_id)
        if not (path / "manifest.txt").exists():
            raise KeyError(session_id)
        return pipeline.load_session(path)

    def delete(self, session_id: str) -> None:
        path = self.path(session_id)
        if not path.exists():
            raise KeyError(session_id)
        shutil.rmtree(path)

    def render_key_lock(self, session_id: str, eta: float, seed: int) -> threading.Lock:
        key = f"{session_id}/{pipeline.format_eta(eta)}/{seed}"
        with self._lock:
            return self._key_locks.setdefault(key, threading.Lock())


def create_app(ckpt_dir: Path, sessions_dir: Path, cfg: dict | None = None) -> FastAPI:
    tune_for_small_models()
    cfg = cfg or config_mod.load_config()
    bundle = load_bundle(Path(ckpt_dir))
    store = SessionStore(Path(sessions_dir))
    gate = DeviceGate()
    jobs = JobQueue(gate=gate)

    app = FastAPI(title="spritedit", version="0.1.0")
    app.state.bundle = bundle
    app.state.store = store
    app.state.jobs = jobs
    app.state.cfg = cfg

    def _get_session(session_id: str) -> EditSession:
        try:
            return store.load(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        except IntegrityError as exc:
            raise HTTPException(status_code=500, detail=str(exc))

    def _job_state(session_id: str) -> tuple[str, str | None]:
        record = jobs.state(session_id)
        if record is None:
            return "none", None
        return record.state, record.error

    def _summary(session: EditSession) -> schemas.SessionSummary:
        state, error = _job_state(session.session_id)
        return schemas.SessionSummary(
            session_id=session.session_id, target_caption=session.target_caption,
            stages=schemas.StageFlags(a=session.stage_a, b=session.stage_b, c=session.stage_c),
            job_state=state, job_error=error)

    def _busy_response() -> HTTPException:
        return HTTPException(status_code=503, detail="fine-tune job occupies the device",
                             headers={"Retry-After": str(cfg["service"]["retry_after"])})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", sessions=len(store.ids()),
                                      job_state="busy" if gate.busy else "idle")

    @app.post("/sessions", response_model=schemas.CreateSessionResponse, status_code=202)
    def create_session(req: schemas.CreateSessionRequest):
        if len(store.ids()) >= cfg["service"]["max_sessions"]:
            raise HTTPException(status_code=507, detail="session quota exceeded")
        if (req.image_id is None) == (req.image_png_base64 is None):
            raise HTTPException(status_code=422,
                                detail="provide exactly one of image_id or image_png_base64")
        if req.image_id is not None:
            spec = sprites.parse_caption(req.image_id)
            if spec is None:
                raise HTTPException(status_code=422,
                                    detail=f"image_id {req.image_id!r} is not a sprite caption")
            x_sr = sprites.render_sprite(spec, sprites.SR_RES)
        else:
            try:
                x_sr = imageio.decode_png(base64.b64decode(req.image_png_base64, validate=True))
            except (binascii.Error, OSError, ValueError):
                raise HTTPException(status_code=422, detail="image_png_base64 is not a valid PNG")
            if x_sr.shape[-2:] != (sprites.SR_RES, sprites.SR_RES):
                raise HTTPException(status_code=422,
                                    detail=f"uploaded image must be {sprites.SR_RES}px square")
        x_base = sr_mod.downsample(x_sr)
        edit_cfg = dict(cfg["edit"])
        edit_cfg.update(req.edit or {})
        try:
            config = EditConfig.from_dict(edit_cfg)
        except (ValueError, TypeError) as exc:
            raise HTTPException(status_code=422, detail=f"bad edit config: {exc}")
        session = pipeline.create_session(bundle, x_base, x_sr, req.target_text,
                                          config, store.root)

        def job():
            s = store.load(session.session_id)
            pipeline.run_stage_a(s, bundle)
            pipeline.run_stage_b(s, bundle)

        jobs.submit(session.session_id, job)
        return schemas.CreateSessionResponse(session_id=session.session_id)

    @app.get("/sessions")
    def list_sessions() -> list[schemas.SessionSummary]:
        return [_summary(store.load(sid)) for sid in store.ids()]

    @app.get("/sessions/{session_id}", response_model=schemas.SessionDetail)
    def session_detail(session_id: str):
        session = _get_session(session_id)
        state, error = _job_state(session_id)
        metrics = [schemas.RenderMetrics(
            eta=float(r["eta"]), seed=int(r["seed"]), alignment=float(r["alignment"]),
            fidelity_psnr=float(r["fidelity_psnr"]), oracle_caption=r["oracle_caption"],
            recommended=r.get("recommended") == "1") for r in session.metrics_rows()]
        cached = []
        renders_dir = session.root / "renders"
        if renders_dir.exists():
            for p in sorted(renders_dir.glob("eta*_seed*.png")):
                stem = p.stem[len("eta"):]
                eta_text, _, seed_text = stem.partition("_seed")
                cached.append({"eta": float(eta_text), "seed": int(seed_text),
                               "url": f"/sessions/{session_id}/render?eta={eta_text}&seed={seed_text}"})
        return schemas.SessionDetail(
            **_summary(session).model_dump() | {
                "seeds": list(session.config.seeds),
                "default_eta": session.config.eta,
                "metrics": metrics,
                "cached_renders": cached,
            })

    @app.get("/sessions/{session_id}/render")
    def render(session_id: str, eta: float, seed: int):
        if not 0.0 <= eta <= 1.0:
            raise HTTPException(status_code=422, detail="eta must be in [0, 1]")
        if seed < 0:
            raise HTTPException(status_code=422, detail="seed must be nonnegative")
        session = _get_session(session_id)
        path = session.render_path(eta, seed)
        if path.exists():
            return Response(content=path.read_bytes(), media_type="image/png")
        if not (session.stage_a and session.stage_b):
            raise HTTPException(status_code=409, detail="stages A and B not complete")
        key_lock = store.render_key_lock(session_id, eta, seed)
        try:
            with gate.reader():
                with key_lock:
                    if not path.exists():
                        pipeline.generate_edit(session, bundle, eta, seed)
        except DeviceBusy:
            raise _busy_response()
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.get("/sessions/{session_id}/sweep", response_model=schemas.SweepResponse)
    def sweep(session_id: str):
        from .. import evalbench

        session = _get_session(session_id)
        if not (session.stage_a and session.stage_b):
            raise HTTPException(status_code=409, detail="stages A and B not complete")
        etas = cfg["sweep"]["etas"]
        seeds = cfg["sweep"]["seeds"]
        missing = [1 for eta in etas for s in seeds
                   if not session.render_path(eta, s, base=True).exists()]
        try:
            if missing:
                with gate.reader():
                    result = evalbench.eta_sweep([session], etas, seeds, bundle)
            else:
                result = evalbench.eta_sweep([session], etas, seeds, bundle)
        except DeviceBusy:
            raise _busy_response()
        rows = [schemas.SweepRowModel(eta=r.eta, mean_alignment=r.mean_alignment,
                                      mean_fidelity=r.mean_fidelity, n=r.n,
                                      seeds=list(r.seeds)) for r in result.rows]
        return schemas.SweepResponse(session_id=session_id, rows=rows)

    @app.delete("/sessions/{session_id}", status_code=204)
    def delete_session(session_id: str):
        try:
            store.delete(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")

    return app
