"""Session-oriented HTTP inference service.

A session pins (scene, frame subset, checkpoint) and warms the embedding
cache once; every prompt update afterwards reuses it, so interactive
latency is decoder-only. Prompt updates replace the full list (idempotent,
stateless per call) and return run-length encoded masks for every view.

The service never reimplements inference: update_prompts calls the same
prepare/predict path the batch evaluator uses, which is what makes the
interactive and batch outputs bit-identical.
"""

from __future__ import annotations

import io
import json
import os
import threading
import uuid
from dataclasses import dataclass
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from . import scenegen
from .training import load_checkpoint


# ---------------------------------------------------------------------------
# Mask wire format


def rle_encode(mask: np.ndarray) -> list:
    """Row-major alternating run lengths, first entry counting zeros.

    An empty first run (mask starting with 1) is encoded as a leading 0 so
    decoders never need a polarity flag.
    """
    flat = (np.asarray(mask).ravel() > 0).astype(np.int64)
    if flat.size == 0:
        return []
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    runs = np.diff(np.concatenate([[0], boundaries, [flat.size]]))
    out = runs.tolist()
    if flat[0] == 1:
        out.insert(0, 0)
    return [int(r) for r in out]


def rle_decode(height: int, width: int, runs: list) -> np.ndarray:
    total = sum(runs)
    if total != height * width:
        raise ValueError(f"run lengths sum to {total}, expected {height * width}")
    if any(r < 0 for r in runs):
        raise ValueError("run lengths must be nonnegative")
    flat = np.zeros(height * width, dtype=np.uint8)
    pos = 0
    value = 0
    for run in runs:
        if value:
            flat[pos : pos + run] = 1
        pos += run
        value ^= 1
    return flat.reshape(height, width)


# ---------------------------------------------------------------------------
# Configuration and stores


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    data_dir: str = "data/scenes"
    checkpoint_dir: str = "checkpoints"
    frontend_dir: str = ""  # optional static bundle mounted at /

    @staticmethod
    def from_file(path: Optional[str] = None, **overrides) -> "ServiceConfig":
        fields = {}
        if path is not None:
            with open(path) as f:
                loaded = json.load(f)
            unknown = set(loaded) - set(ServiceConfig.__dataclass_fields__)
            if unknown:
                raise ValueError(f"unknown service config keys: {sorted(unknown)}")
            fields.update(loaded)
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return ServiceConfig(**fields)


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str, detail=None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.detail = detail


class SceneLibrary:
    """Lazy-loading view over the scene bundle directory."""

    def __init__(self, data_dir: str):
        self.data_dir = data_dir
        self._cache = {}
        self._lock = threading.Lock()

    def catalog(self) -> list:
        entries = []
        if not os.path.isdir(self.data_dir):
            return entries
        for name in sorted(os.listdir(self.data_dir)):
            meta_path = os.path.join(self.data_dir, name, "scene.json")
            if not os.path.isfile(meta_path):
                continue
            with open(meta_path) as f:
                meta = json.load(f)
            entries.append(
                {
                    "scene_id": meta["scene_id"],
                    "n_views": meta["n_views"],
                    "height": meta["height"],
                    "width": meta["width"],
                    "objects": [o["object_id"] for o in meta.get("objects", [])],
                }
            )
        return entries

    def load(self, scene_id: str) -> scenegen.SceneBundle:
        with self._lock:
            if scene_id in self._cache:
                return self._cache[scene_id]
        directory = os.path.join(self.data_dir, scene_id)
        if not os.path.isfile(os.path.join(directory, "scene.json")):
            raise ServiceError(404, "scene_not_found", f"no scene named {scene_id!r}")
        bundle = scenegen.load_bundle(directory)
        with self._lock:
            self._cache[scene_id] = bundle
        return bundle


class CheckpointStore:
    def __init__(self, checkpoint_dir: str):
        self.checkpoint_dir = checkpoint_dir
        self._cache = {}
        self._lock = threading.Lock()

    def catalog(self) -> list:
        if not os.path.isdir(self.checkpoint_dir):
            return []
        return sorted(
            name
            for name in os.listdir(self.checkpoint_dir)
            if os.path.isfile(os.path.join(self.checkpoint_dir, name, "manifest.json"))
        )

    def load(self, checkpoint_id: str):
        with self._lock:
            if checkpoint_id in self._cache:
                return self._cache[checkpoint_id]
        directory = os.path.join(self.checkpoint_dir, checkpoint_id)
        if not os.path.isfile(os.path.join(directory, "manifest.json")):
            raise ServiceError(
                404, "checkpoint_not_found", f"no checkpoint named {checkpoint_id!r}"
            )
        model, _ = load_checkpoint(directory)
        with self._lock:
            self._cache[checkpoint_id] = model
        return model


class Session:
    def __init__(self, session_id, scene_id, checkpoint_id, views, model, state):
        self.session_id = session_id
        self.scene_id = scene_id
        self.checkpoint_id = checkpoint_id
        self.views = views
        self.model = model
        self.state = state  # cached stats + point grids, computed once
        self.prompts = []
        self.lock = threading.Lock()  # serializes prompt updates per session


# ---------------------------------------------------------------------------
# Request/response schemas


class SessionRequest(BaseModel):
    scene_id: str
    checkpoint_id: str
    frames: Optional[int] = None


class PromptIn(BaseModel):
    view: int
    row: int
    col: int
    polarity: int


class PromptUpdate(BaseModel):
    prompts: list[PromptIn]


def _error_response(status: int, code: str, message: str, detail=None) -> JSONResponse:
    body = {"error": {"code": code, "message": message}}
    if detail is not None:
        body["error"]["detail"] = detail
    return JSONResponse(status_code=status, content=body)


def _png_bytes(image: np.ndarray) -> bytes:
    raster = np.round(np.asarray(image) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(raster).save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Application


def create_app(config: ServiceConfig) -> FastAPI:
    app = FastAPI(title="mvseg service")
    library = SceneLibrary(config.data_dir)
    checkpoints = CheckpointStore(config.checkpoint_dir)
    sessions = {}
    sessions_lock = threading.Lock()

    @app.exception_handler(ServiceError)
    async def on_service_error(request: Request, exc: ServiceError):
        return _error_response(exc.status, exc.code, exc.message, exc.detail)

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request, exc: RequestValidationError):
        return _error_response(
            422, "invalid_request", "request body failed validation", detail=exc.errors()
        )

    def get_session(session_id: str) -> Session:
        with sessions_lock:
            session = sessions.get(session_id)
        if session is None:
            raise ServiceError(404, "session_not_found", f"no session {session_id!r}")
        return session

    @app.get("/scenes")
    def list_scenes():
        return {"scenes": library.catalog(), "checkpoints": checkpoints.catalog()}

    @app.post("/sessions", status_code=201)
    def create_session(body: SessionRequest):
        bundle = library.load(body.scene_id)
        model = checkpoints.load(body.checkpoint_id)
        views = bundle.views
        if body.frames is not None:
            if not 1 <= body.frames <= len(views):
                raise ServiceError(
                    422,
                    "invalid_frames",
                    f"frames must be in [1, {len(views)}], got {body.frames}",
                )
            views = views[: body.frames]
        session = Session(
            session_id=uuid.uuid4().hex,
            scene_id=body.scene_id,
            checkpoint_id=body.checkpoint_id,
            views=views,
            model=model,
            state=model.prepare(views),
        )
        with sessions_lock:
            sessions[session.session_id] = session
        return {
            "session_id": session.session_id,
            "scene_id": session.scene_id,
            "checkpoint_id": session.checkpoint_id,
            "n_views": len(views),
            "height": views[0].image.shape[0],
            "width": views[0].image.shape[1],
            "views": [
                f"/sessions/{session.session_id}/views/{v}/image"
                for v in range(len(views))
            ],
        }

    @app.post("/sessions/{session_id}/prompts")
    def update_prompts(session_id: str, body: PromptUpdate):
        session = get_session(session_id)
        if not body.prompts:
            raise ServiceError(422, "empty_prompts", "at least one prompt required")
        height = session.views[0].image.shape[0]
        width = session.views[0].image.shape[1]
        prompts = []
        for i, p in enumerate(body.prompts):
            if not 0 <= p.view < len(session.views):
                raise ServiceError(
                    422, "invalid_prompt",
                    f"prompt {i}: view {p.view} out of range [0, {len(session.views)})",
                    detail={"index": i},
                )
            if not (0 <= p.row < height and 0 <= p.col < width):
                raise ServiceError(
                    422, "invalid_prompt",
                    f"prompt {i}: pixel ({p.row}, {p.col}) outside {height}x{width}",
                    detail={"index": i},
                )
            if p.polarity not in (1, -1):
                raise ServiceError(
                    422, "invalid_prompt",
                    f"prompt {i}: polarity must be 1 or -1, got {p.polarity}",
                    detail={"index": i},
                )
            prompts.append((p.view, p.row, p.col, p.polarity))
        with session.lock:
            predictions = session.model.predict(session.state, prompts)
            session.prompts = prompts
        return {
            "masks": [
                {
                    "view": v,
                    "h": int(pred.binary.shape[0]),
                    "w": int(pred.binary.shape[1]),
                    "rle": rle_encode(pred.binary),
                }
                for v, pred in enumerate(predictions)
            ]
        }

    @app.get("/sessions/{session_id}/views/{view_index}/image")
    def get_view_image(session_id: str, view_index: int):
        session = get_session(session_id)
        if not 0 <= view_index < len(session.views):
            raise ServiceError(
                404, "view_not_found",
                f"view {view_index} out of range [0, {len(session.views)})",
            )
        return Response(
            content=_png_bytes(session.views[view_index].image),
            media_type="image/png",
        )

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str):
        with sessions_lock:
            if session_id not in sessions:
                raise ServiceError(404, "session_not_found", f"no session {session_id!r}")
            del sessions[session_id]
        return {"deleted": session_id}

    if config.frontend_dir and os.path.isdir(config.frontend_dir):
        app.mount("/", StaticFiles(directory=config.frontend_dir, html=True), name="ui")

    return app


def run_service(config: ServiceConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="info")
