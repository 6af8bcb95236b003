"""Edit server backing the interactive editor.

Sessions are in-memory and ephemeral: a server restart yields an empty
session set. Each session holds the current mesh, a bounded undo stack,
and at most one in-flight sampling job; jobs run on a bounded worker pool
and stream progress over a WebSocket. Mesh payloads travel as raw
little-endian float32 vertex arrays; the topology is sent once when the
session is created.

Request/response shapes are documented in ``service_schema.json`` next to
this module.
"""

from __future__ import annotations

import asyncio
import base64
import collections
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response, WebSocket, WebSocketDisconnect

from .editing import EditModel, anchor_region_mask, parse_region_spec, sample_region, swap_mask
from .errors import ConfigError, MeshSculptError
from .mesh import MeshSample, RegionMask


@dataclass
class Job:
    id: str
    kind: str
    state: str = "running"  # running | done | error
    events: list = field(default_factory=list)
    stats: dict | None = None
    error: str | None = None


@dataclass
class Session:
    id: str
    mesh: np.ndarray  # (N, 3) float64, model units
    undo: collections.deque = None
    job: Job | None = None
    variations: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


def _json_mask(mask: RegionMask) -> list:
    return [int(v) for v in mask.masked_indices()]


def create_app(
    model: EditModel,
    progress_every: int = 50,
    max_jobs: int = 2,
    undo_depth: int = 32,
) -> FastAPI:
    app = FastAPI(title="meshsculpt edit service")
    sessions: dict[str, Session] = {}
    executor = ThreadPoolExecutor(max_workers=max_jobs)
    slots = threading.Semaphore(max_jobs)
    n_verts = model.topology.vertex_count

    def get_session(session_id: str) -> Session:
        s = sessions.get(session_id)
        if s is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return s

    def parse_body_mask(session: Session, body: dict, kind: str) -> RegionMask:
        anchors, region = parse_region_spec(body, n_verts)
        region_vertices = None
        hops = 3
        if region is not None and "vertices" in region:
            region_vertices = region["vertices"]
        elif region is not None and "hops" in region:
            hops = region["hops"]
        if kind == "swap":
            if region_vertices is None:
                if not anchors:
                    raise ConfigError("swap region needs explicit vertices or anchors+hops")
                base = anchor_region_mask(model.topology, anchors, hops)
                region_vertices = [int(v) for v in base.masked_indices()]
                region_vertices += [v for v, _ in anchors]
            mesh_b64 = body.get("mesh_b_b64")
            if not mesh_b64:
                raise ConfigError("swap needs mesh_b_b64 (little-endian float32 vertices)")
            raw = base64.b64decode(mesh_b64)
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            if arr.size != n_verts * 3:
                raise HTTPException(status_code=422,
                                    detail=f"mesh_b has {arr.size // 3} vertices, expected {n_verts}")
            return swap_mask(model.topology, region_vertices, MeshSample(arr.reshape(-1, 3)))
        if not anchors and region_vertices is None:
            raise ConfigError(f"{kind} needs anchors or an explicit region")
        if anchors:
            return anchor_region_mask(model.topology, anchors, hops, region_vertices)
        flags = np.zeros(n_verts, dtype=bool)
        flags[np.asarray(region_vertices, dtype=np.int64)] = True
        return RegionMask(flags, {})

    def launch(session: Session, kind: str, mask: RegionMask, seed: int, n: int) -> Job:
        with session.lock:
            if session.job is not None and session.job.state == "running":
                raise HTTPException(status_code=409, detail="a job is already running")
            if not slots.acquire(blocking=False):
                raise HTTPException(status_code=429, detail="server is at its job limit")
            job = Job(id=uuid.uuid4().hex, kind=kind)
            session.job = job
            snapshot = session.mesh.copy()

        def progress_cb(t_remaining: int, fraction: float):
            job.events.append({
                "job_id": job.id,
                "t_remaining": int(t_remaining),
                "fraction_done": float(fraction),
            })

        def work():
            try:
                outs = sample_region(
                    MeshSample(snapshot), mask, n, model, seed,
                    progress_cb=progress_cb, progress_every=progress_every,
                )
                with session.lock:
                    if kind == "sample-region":
                        session.variations = [m.positions for m in outs]
                        new_mesh = session.mesh  # gallery only; state unchanged
                    else:
                        session.undo.append(session.mesh.copy())
                        session.mesh = outs[0].positions
                        new_mesh = session.mesh
                    disp = float(np.linalg.norm(new_mesh - snapshot, axis=1).max()) \
                        if kind != "sample-region" else 0.0
                    job.stats = {
                        "masked_vertices": int(mask.masked_count),
                        "max_displacement": disp,
                    }
                    job.state = "done"
            except Exception as exc:  # terminal event still emitted exactly once
                job.error = str(exc)
                job.stats = {"masked_vertices": int(mask.masked_count), "max_displacement": 0.0}
                job.state = "error"
            finally:
                terminal = {"job_id": job.id, "done": True, "stats": job.stats}
                if job.error is not None:
                    terminal["error"] = job.error
                job.events.append(terminal)
                slots.release()

        executor.submit(work)
        return job

    # ------------------------------------------------------------------ routes

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "vertex_count": n_verts}

    @app.post("/session")
    async def create_session(request: Request):
        raw = await request.body()
        if raw:
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            if arr.size != n_verts * 3:
                raise HTTPException(status_code=422,
                                    detail=f"uploaded mesh has {arr.size // 3} vertices, expected {n_verts}")
            mesh = arr.reshape(-1, 3)
        else:
            mesh = model.mean_shape.copy()
        session = Session(id=uuid.uuid4().hex, mesh=mesh,
                          undo=collections.deque(maxlen=undo_depth))
        sessions[session.id] = session
        return {
            "session_id": session.id,
            "vertex_count": n_verts,
            "faces": model.topology.faces.tolist(),
        }

    @app.get("/session/{session_id}/mesh")
    def get_mesh(session_id: str):
        session = get_session(session_id)
        with session.lock:
            payload = session.mesh.astype("<f4").tobytes()
        return Response(content=payload, media_type="application/octet-stream")

    @app.get("/session/{session_id}/job")
    def get_job(session_id: str):
        session = get_session(session_id)
        job = session.job
        if job is None:
            return {"state": "idle"}
        out = {"state": job.state, "job_id": job.id, "kind": job.kind}
        if job.stats is not None:
            out["stats"] = job.stats
        if job.error is not None:
            out["error"] = job.error
        return out

    def _edit_like(session_id: str, body: dict, kind: str, n: int = 1):
        session = get_session(session_id)
        try:
            mask = parse_body_mask(session, body, kind)
        except MeshSculptError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        seed = int(body.get("seed", 0))
        job = launch(session, kind, mask, seed, n)
        return {"job_id": job.id, "mask": _json_mask(mask)}

    @app.post("/session/{session_id}/edit")
    async def edit(session_id: str, request: Request):
        return _edit_like(session_id, await request.json(), "edit")

    @app.post("/session/{session_id}/sample-region")
    async def sample_region_ep(session_id: str, request: Request):
        body = await request.json()
        n = int(body.get("n", 1))
        if not 1 <= n <= 16:
            raise HTTPException(status_code=400, detail="n must be in [1, 16]")
        return _edit_like(session_id, body, "sample-region", n=n)

    @app.post("/session/{session_id}/swap")
    async def swap(session_id: str, request: Request):
        return _edit_like(session_id, await request.json(), "swap")

    @app.post("/session/{session_id}/undo")
    def undo(session_id: str):
        session = get_session(session_id)
        with session.lock:
            if session.job is not None and session.job.state == "running":
                raise HTTPException(status_code=409, detail="a job is already running")
            if not session.undo:
                raise HTTPException(status_code=409, detail="nothing to undo")
            session.mesh = session.undo.pop()
            return {"ok": True, "undo_depth": len(session.undo)}

    @app.get("/session/{session_id}/variations/{k}")
    def get_variation(session_id: str, k: int):
        session = get_session(session_id)
        with session.lock:
            if not 0 <= k < len(session.variations):
                raise HTTPException(status_code=404, detail=f"no variation {k}")
            payload = session.variations[k].astype("<f4").tobytes()
        return Response(content=payload, media_type="application/octet-stream")

    @app.post("/session/{session_id}/select-variation")
    async def select_variation(session_id: str, request: Request):
        body = await request.json()
        k = int(body.get("k", -1))
        session = get_session(session_id)
        with session.lock:
            if session.job is not None and session.job.state == "running":
                raise HTTPException(status_code=409, detail="a job is already running")
            if not 0 <= k < len(session.variations):
                raise HTTPException(status_code=404, detail=f"no variation {k}")
            session.undo.append(session.mesh.copy())
            session.mesh = session.variations[k].copy()
        return {"ok": True}

    @app.websocket("/session/{session_id}/progress")
    async def progress(ws: WebSocket, session_id: str):
        await ws.accept()
        session = sessions.get(session_id)
        if session is None:
            await ws.close(code=4404)
            return

        async def reader():
            # clients never send; this returns when the socket closes
            try:
                while True:
                    await ws.receive()
            except Exception:
                pass

        reader_task = asyncio.create_task(reader())
        sent = 0
        job_id = None
        try:
            while not reader_task.done():
                job = session.job
                if job is not None:
                    if job.id != job_id:
                        job_id = job.id
                        sent = 0
                    events = job.events
                    while sent < len(events):
                        await ws.send_json(events[sent])
                        sent += 1
                await asyncio.sleep(0.01)
        except WebSocketDisconnect:
            pass  # the job keeps running; results stay available over GET
        finally:
            reader_task.cancel()

    return app
