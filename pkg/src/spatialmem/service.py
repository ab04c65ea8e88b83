"""HTTP session service: create exploration sessions, step them with
camera actions, and read back composites, anchors, coverage overlays, and
retrieval traces.

Sessions live in memory. Each one is single-writer: a step request on a
session that is already stepping is rejected with 409 rather than queued.
A step commits all-or-nothing — when the engine raises, the session keeps
its previous state and returns to "ready".
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from spatialmem.actions import ActionStep, ScriptError, format_script
from spatialmem.images import png_bytes
from spatialmem.loop import (
    LoopConfig,
    SessionState,
    bootstrap_session,
    run_action_group,
    scene_context,
)
from spatialmem.retrieval import coverage_of
from spatialmem.scene import ground_truth_estimator, make_scene

DEFAULT_CONTEXT_FRAMES = 12
OVERLAY_ALPHA = 0.45
OVERLAY_GREEN = np.array([0.1, 0.9, 0.2], dtype=np.float32)


@dataclass
class ChunkRecord:
    """Global-ordinal handle onto one retrieved chunk of one segment."""

    segment_index: int
    chunk_in_segment: int
    first_frame_index: int


@dataclass
class Session:
    id: str
    created_at: float
    config: LoopConfig
    scene_seed: int
    state: SessionState
    history: list = field(default_factory=list)
    chunk_records: list = field(default_factory=list)
    busy: bool = False
    error: str | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def status(self) -> str:
        if self.busy:
            return "stepping"
        if self.error is not None:
            return "error"
        return "ready"

    def handle(self) -> dict:
        return {
            "id": self.id,
            "created_at": self.created_at,
            "status": self.status,
            "scene_seed": self.scene_seed,
            "config": self.config.to_dict(),
        }


class ActionStepBody(BaseModel):
    action: str
    repeat: int = Field(default=1, ge=1)


class StepRequest(BaseModel):
    actions: list[ActionStepBody] = Field(min_length=1)


class CreateSessionRequest(BaseModel):
    scene_seed: int | None = None
    context_frames: int = Field(default=DEFAULT_CONTEXT_FRAMES, ge=1)
    config: dict = Field(default_factory=dict)


class SessionStore:
    def __init__(self, scene_seed_default: int = 0, max_sessions: int = 64):
        self.scene_seed_default = scene_seed_default
        self.max_sessions = max_sessions
        self.sessions: dict = {}
        self.lock = threading.Lock()

    def get(self, session_id: str) -> Session:
        session = self.sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"no session {session_id}")
        return session


def _build_config(overrides: dict) -> LoopConfig:
    base = LoopConfig().to_dict()
    for key, value in overrides.items():
        if key not in base:
            raise HTTPException(status_code=400, detail=f"unknown config field {key!r}")
        if key == "intrinsics":
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    try:
        return LoopConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


def _segment_urls(session: Session, new_segments) -> dict:
    frames = []
    for seg in new_segments:
        for frame in seg.frames:
            chunk_local = (frame.index - seg.trace.frame_range[0]) // session.config.D
            ordinal = None
            for i, rec in enumerate(session.chunk_records):
                if (
                    rec.segment_index == seg.trace.segment_index
                    and rec.chunk_in_segment == chunk_local
                ):
                    ordinal = i
                    break
            t = frame.index - seg.trace.frame_range[0]
            frames.append(
                {
                    "index": frame.index,
                    "url": f"/sessions/{session.id}/frames/{frame.index}",
                    "chunk": ordinal,
                    "hole_fraction": seg.trace.hole_fractions[t],
                    "slot_weights": list(seg.trace.slot_weights[t]),
                    "slot_sources": list(seg.trace.chunks[chunk_local].selected),
                    "anchors": [
                        f"/sessions/{session.id}/anchors/{frame.index}/{slot}"
                        for slot in range(session.config.K)
                    ],
                }
            )
    return frames


def _find_segment_frame(session: Session, index: int):
    for seg in session.state.segments:
        lo, hi = seg.trace.frame_range
        if lo <= index < hi:
            return seg, index - lo
    raise HTTPException(status_code=404, detail=f"no generated frame {index}")


def create_app(scene_seed_default: int = 0, max_sessions: int = 64) -> FastAPI:
    app = FastAPI(
        title="spatialmem session service",
        description=(
            "Interactive camera-driven frame generation backed by a bank of "
            "local point-cloud memories."
        ),
        version="0.1.0",
    )
    # The browser client is served from its own origin during development.
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    store = SessionStore(scene_seed_default, max_sessions)
    app.state.store = store

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionRequest) -> dict:
        with store.lock:
            if len(store.sessions) >= store.max_sessions:
                raise HTTPException(status_code=429, detail="session limit reached")
        seed = store.scene_seed_default if body.scene_seed is None else body.scene_seed
        config = _build_config(body.config)
        scene = make_scene(seed)
        estimator = ground_truth_estimator(scene)
        context = scene_context(scene, config.intrinsics, n_frames=body.context_frames)
        state = bootstrap_session(context, config, estimator)
        session = Session(
            id=uuid.uuid4().hex,
            created_at=time.time(),
            config=config,
            scene_seed=seed,
            state=state,
        )
        with store.lock:
            if len(store.sessions) >= store.max_sessions:
                raise HTTPException(status_code=429, detail="session limit reached")
            store.sessions[session.id] = session
        return session.handle()

    @app.post("/sessions/{session_id}/step")
    def step(session_id: str, body: StepRequest) -> dict:
        session = store.get(session_id)
        with session.lock:
            if session.busy:
                raise HTTPException(status_code=409, detail="session is stepping")
            session.busy = True
        try:
            steps = [ActionStep(a.action, a.repeat) for a in body.actions]
        except ScriptError as exc:
            with session.lock:
                session.busy = False
            raise HTTPException(status_code=400, detail=str(exc)) from exc

        state = session.state
        n_before = len(state.segments)
        first_new_frame = state.next_frame_index
        try:
            for action in steps:
                state = run_action_group(state, action)
        except Exception as exc:
            with session.lock:
                session.busy = False
                session.error = str(exc)
            raise HTTPException(status_code=500, detail=f"step failed: {exc}") from exc

        new_segments = state.segments[n_before:]
        with session.lock:
            session.state = state
            session.history.extend(steps)
            for seg in new_segments:
                for c, chunk in enumerate(seg.trace.chunks):
                    session.chunk_records.append(
                        ChunkRecord(
                            segment_index=seg.trace.segment_index,
                            chunk_in_segment=c,
                            first_frame_index=chunk.frame_range[0],
                        )
                    )
            session.busy = False
            session.error = None

        return {
            "session_id": session.id,
            "status": session.status,
            "new_frame_indices": list(range(first_new_frame, state.next_frame_index)),
            "retrieval_trace": [seg.trace.to_dict() for seg in new_segments],
            "coverage_fractions": [
                chunk.coverage_fraction for seg in new_segments for chunk in seg.trace.chunks
            ],
            "coverage_urls": [
                f"/sessions/{session.id}/coverage/{i}"
                for i in range(
                    len(session.chunk_records)
                    - sum(len(seg.trace.chunks) for seg in new_segments),
                    len(session.chunk_records),
                )
            ],
            "frames": _segment_urls(session, new_segments),
        }

    @app.get("/sessions/{session_id}/state")
    def get_state(session_id: str) -> dict:
        session = store.get(session_id)
        state = session.state
        return {
            **session.handle(),
            "context_len": state.context_len,
            "n_generated": len(state.generated),
            "next_frame_index": state.next_frame_index,
            "bank_size": len(state.bank.entries),
            "history": [{"action": s.action, "repeat": s.repeat} for s in session.history],
            "history_script": format_script(session.history) if session.history else "",
            "n_chunks": len(session.chunk_records),
            "traces": [seg.trace.to_dict() for seg in state.segments],
        }

    @app.get(
        "/sessions/{session_id}/frames/{index}",
        responses={200: {"content": {"image/png": {}}}},
        response_class=Response,
    )
    def get_frame(session_id: str, index: int) -> Response:
        session = store.get(session_id)
        state = session.state
        if 0 <= index < state.context_len:
            rgb = state.context_frames[index].rgb
        else:
            seg, offset = _find_segment_frame(session, index)
            rgb = seg.frames[offset].rgb
        return Response(content=png_bytes(rgb), media_type="image/png")

    @app.get(
        "/sessions/{session_id}/anchors/{index}/{slot}",
        responses={200: {"content": {"image/png": {}}}},
        response_class=Response,
    )
    def get_anchor(session_id: str, index: int, slot: int) -> Response:
        session = store.get(session_id)
        if not 0 <= slot < session.config.K:
            raise HTTPException(status_code=404, detail=f"no slot {slot}")
        seg, offset = _find_segment_frame(session, index)
        frame = seg.bundle.videos[slot].frames[offset]
        return Response(content=png_bytes(frame.rgb), media_type="image/png")

    @app.get(
        "/sessions/{session_id}/coverage/{chunk}",
        responses={200: {"content": {"image/png": {}}}},
        response_class=Response,
    )
    def get_coverage(session_id: str, chunk: int) -> Response:
        session = store.get(session_id)
        if not 0 <= chunk < len(session.chunk_records):
            raise HTTPException(status_code=404, detail=f"no chunk {chunk}")
        record = session.chunk_records[chunk]
        seg = session.state.segments[record.segment_index]
        trace = seg.trace.chunks[record.chunk_in_segment]
        frame = seg.frames[record.first_frame_index - seg.trace.frame_range[0]]

        cfg = session.config
        plan = seg.bundle.chunk_plans[record.chunk_in_segment]
        covered = None
        for mem_id in trace.selected:
            cm = coverage_of(
                session.state.bank.entry(mem_id),
                plan,
                cfg.intrinsics,
                cfg.splat_radius,
                cfg.coverage_scale,
            )
            mask = cm.rasters[0]
            covered = mask if covered is None else (covered | mask)
        if covered is None:
            covered = np.zeros(
                (
                    max(1, cfg.intrinsics.height // cfg.coverage_scale),
                    max(1, cfg.intrinsics.width // cfg.coverage_scale),
                ),
                dtype=bool,
            )
        up = np.kron(covered, np.ones((cfg.coverage_scale, cfg.coverage_scale), dtype=bool))
        full = np.zeros((cfg.intrinsics.height, cfg.intrinsics.width), dtype=bool)
        clip = up[: cfg.intrinsics.height, : cfg.intrinsics.width]
        full[: clip.shape[0], : clip.shape[1]] = clip
        rgb = frame.rgb.copy()
        rgb[full] = (1.0 - OVERLAY_ALPHA) * rgb[full] + OVERLAY_ALPHA * OVERLAY_GREEN
        return Response(content=png_bytes(rgb), media_type="image/png")

    @app.delete("/sessions/{session_id}", status_code=204)
    def delete_session(session_id: str) -> Response:
        store.get(session_id)
        with store.lock:
            store.sessions.pop(session_id, None)
        return Response(status_code=204)

    return app


def serve(port: int = 8000, scene_seed_default: int = 0, max_sessions: int = 64) -> None:
    import uvicorn

    app = create_app(scene_seed_default=scene_seed_default, max_sessions=max_sessions)
    uvicorn.run(app, host="127.0.0.1", port=port)
