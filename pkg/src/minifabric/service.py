"""Session-based HTTP service for interactive feedback rounds.

JSON over HTTP under /v1; sessions persist as session.json plus per-image
PNGs so a restarted process serves identical state. The HTTP layer computes
nothing itself: all numbers in responses come from the evaluation module
over the stored (quantized) images.
"""

from __future__ import annotations

import base64
import io
import json
import os
import secrets
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image

from .evaluation import EmbeddingModel, feedback_similarity, in_batch_diversity
from .feedback import (
    FeedbackSchedule,
    FeedbackState,
    GenerationConfig,
    ModelBundle,
    generate,
    prompt_dropout,
)
from .schedule import rng_from, seed_from
from .shapes import Prompt, from_uint8, load_png, quantize, save_png, to_uint8

SESSION_SCHEMA = 1
DATA_DIR_ENV = "FABRIC_DATA_DIR"


class ApiError(Exception):
    status = 500
    code = "internal"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class UnknownSession(ApiError):
    status = 404
    code = "unknown_session"


class Busy(ApiError):
    status = 409
    code = "busy"


class InvalidFeedback(ApiError):
    status = 400
    code = "invalid_feedback"


class BadRequest(ApiError):
    status = 400
    code = "bad_request"


_CONFIG_KEYS = {
    "batch_size",
    "feedback_strength",
    "schedule_kind",
    "cutoff",
    "dropout_p",
    "steps",
    "guidance_scale",
    "seed",
}


@dataclass
class SessionConfig:
    batch_size: int = 4
    feedback_strength: float = 0.8
    schedule_kind: str = "first_half"
    cutoff: float = 0.5
    dropout_p: float = 0.0
    steps: int = 50
    guidance_scale: float = 3.0
    seed: int = 0

    def generation_config(self) -> GenerationConfig:
        return GenerationConfig(
            batch_size=self.batch_size,
            rounds=1,
            feedback_schedule=FeedbackSchedule(kind=self.schedule_kind, w_max=self.feedback_strength, cutoff=self.cutoff),
            dropout_p=self.dropout_p,
            steps=self.steps,
            guidance_scale=self.guidance_scale,
            seed=self.seed,
        )


@dataclass
class Session:
    session_id: str
    prompt: Prompt
    config: SessionConfig
    liked_ids: list[str] = field(default_factory=list)
    disliked_ids: list[str] = field(default_factory=list)
    rounds: list[dict] = field(default_factory=list)
    status: str = "idle"
    created_at: float = 0.0
    updated_at: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SESSION_SCHEMA,
            "session_id": self.session_id,
            "prompt": self.prompt.as_dict(),
            "config": asdict(self.config),
            "feedback": {"liked": self.liked_ids, "disliked": self.disliked_ids},
            "rounds": self.rounds,
            "status": self.status,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }


class SessionStore:
    """Disk-backed sessions with per-session mutual exclusion."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._sessions: dict[str, Session] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._global = threading.Lock()

    def _dir(self, session_id: str) -> Path:
        return self.root / session_id

    def lock(self, session_id: str) -> threading.Lock:
        with self._global:
            if session_id not in self._locks:
                self._locks[session_id] = threading.Lock()
            return self._locks[session_id]

    def create(self, prompt: Prompt, config: SessionConfig) -> Session:
        session_id = secrets.token_hex(16)
        now = time.time()
        session = Session(session_id, prompt, config, created_at=now, updated_at=now)
        with self._global:
            self._sessions[session_id] = session
        self.save(session)
        return session

    def get(self, session_id: str) -> Session:
        with self._global:
            if session_id in self._sessions:
                return self._sessions[session_id]
        path = self._dir(session_id) / "session.json"
        if not path.exists():
            raise UnknownSession(f"no session {session_id!r}")
        data = json.loads(path.read_text())
        if data.get("schema_version") != SESSION_SCHEMA:
            raise ApiError(f"session {session_id!r} has unsupported schema")
        session = Session(
            session_id=data["session_id"],
            prompt=Prompt(**data["prompt"]),
            config=SessionConfig(**data["config"]),
            liked_ids=data["feedback"]["liked"],
            disliked_ids=data["feedback"]["disliked"],
            rounds=data["rounds"],
            status="idle",  # any in-flight work died with the old process
            created_at=data["created_at"],
            updated_at=data["updated_at"],
        )
        with self._global:
            self._sessions.setdefault(session_id, session)
            return self._sessions[session_id]

    def save(self, session: Session) -> None:
        d = self._dir(session.session_id)
        d.mkdir(parents=True, exist_ok=True)
        tmp = d / "session.json.tmp"
        tmp.write_text(json.dumps(session.to_json_dict(), indent=1))
        tmp.replace(d / "session.json")

    def image_path(self, session_id: str, image_id: str) -> Path:
        return self._dir(session_id) / "images" / f"{image_id}.png"

    def save_image(self, session_id: str, image_id: str, img: np.ndarray) -> None:
        path = self.image_path(session_id, image_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_png(img, path)

    def load_image(self, session_id: str, image_id: str) -> np.ndarray:
        path = self.image_path(session_id, image_id)
        if not path.exists():
            raise InvalidFeedback(f"image {image_id!r} not found in session")
        return load_png(path)


def _parse_prompt(payload) -> Prompt:
    if not isinstance(payload, dict):
        raise BadRequest("prompt must be an object with shape/color/size")
    extra = set(payload) - {"shape", "color", "size"}
    if extra:
        raise BadRequest(f"unknown prompt keys {sorted(extra)}")
    try:
        return Prompt(**payload)
    except ValueError as exc:
        raise BadRequest(str(exc))


def _parse_config(payload) -> SessionConfig:
    if payload is None:
        return SessionConfig()
    if not isinstance(payload, dict):
        raise BadRequest("config must be an object")
    extra = set(payload) - _CONFIG_KEYS
    if extra:
        raise BadRequest(f"unknown config keys {sorted(extra)}")
    try:
        cfg = SessionConfig(**payload)
        cfg.generation_config()  # validates ranges
    except (TypeError, ValueError) as exc:
        raise BadRequest(str(exc))
    return cfg


def _png_base64(img: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(
    model: ModelBundle,
    embedder: EmbeddingModel,
    data_dir: str | Path | None = None,
    ui_dir: str | Path | None = None,
    workers: int | None = None,
    generate_timeout_s: float = 120.0,
) -> FastAPI:
    root = Path(data_dir or os.environ.get(DATA_DIR_ENV) or "fabric-data")
    store = SessionStore(root / "sessions")
    pool = ThreadPoolExecutor(max_workers=workers or os.cpu_count() or 2)
    app = FastAPI(title="minifabric gateway")
    app.state.store = store

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status,
            content={"error": {"code": exc.code, "message": exc.message}},
        )

    @app.exception_handler(Exception)
    async def handle_unexpected(request: Request, exc: Exception):
        return JSONResponse(
            status_code=500,
            content={"error": {"code": "internal", "message": str(exc)}},
        )

    @app.get("/v1/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/v1/sessions")
    async def create_session(request: Request):
        body = await request.json()
        if not isinstance(body, dict):
            raise BadRequest("body must be a JSON object")
        extra = set(body) - {"prompt", "config"}
        if extra:
            raise BadRequest(f"unknown keys {sorted(extra)}")
        prompt = _parse_prompt(body.get("prompt", {}))
        config = _parse_config(body.get("config"))
        session = store.create(prompt, config)
        return {"session_id": session.session_id}

    def _load_feedback_state(session: Session) -> FeedbackState:
        liked = [store.load_image(session.session_id, i) for i in session.liked_ids]
        disliked = [store.load_image(session.session_id, i) for i in session.disliked_ids]
        return FeedbackState(liked=liked, disliked=disliked, round_index=len(session.rounds))

    def _run_generation(session: Session) -> dict:
        r = len(session.rounds) + 1
        state = _load_feedback_state(session)
        cfg = session.config.generation_config()
        drop_rng = rng_from(cfg.seed, "dropout", r)
        used = prompt_dropout(session.prompt, cfg.dropout_p, drop_rng) if cfg.dropout_p > 0 else session.prompt
        batch = generate(model, used, state, cfg, seed=seed_from(cfg.seed, "round", r))
        batch = np.stack([quantize(im) for im in batch])
        image_ids = [f"r{r:03d}_{i}" for i in range(batch.shape[0])]
        for image_id, img in zip(image_ids, batch):
            store.save_image(session.session_id, image_id, img)

        metrics: dict = {"s_pos": None, "s_neg": None}
        if batch.shape[0] >= 2:
            metrics["diversity"] = in_batch_diversity(embedder, batch).d
        else:
            metrics["diversity"] = None
        if not state.empty:
            s_pos_vals, s_neg_vals = [], []
            for img in batch:
                rep = feedback_similarity(embedder, img, state.liked, state.disliked)
                if rep.s_pos is not None:
                    s_pos_vals.append(rep.s_pos)
                if rep.s_neg is not None:
                    s_neg_vals.append(rep.s_neg)
            metrics["s_pos"] = float(np.mean(s_pos_vals)) if s_pos_vals else None
            metrics["s_neg"] = float(np.mean(s_neg_vals)) if s_neg_vals else None

        return {
            "round_index": r,
            "image_ids": image_ids,
            "prompt_used": used.as_dict(),
            "metrics": metrics,
        }

    @app.post("/v1/sessions/{session_id}/generate")
    def generate_round(session_id: str):
        session = store.get(session_id)
        lock = store.lock(session_id)
        with lock:
            if session.status == "generating":
                raise Busy(f"session {session_id!r} already generating")
            session.status = "generating"
        try:
            future = pool.submit(_run_generation, session)
            record = future.result(timeout=generate_timeout_s)
            with lock:
                session.rounds.append(record)
                session.updated_at = time.time()
        finally:
            with lock:
                session.status = "idle"
        store.save(session)
        images = [
            {"id": image_id, "png_base64": _png_base64(store.load_image(session_id, image_id))}
            for image_id in record["image_ids"]
        ]
        return {
            "round_index": record["round_index"],
            "images": images,
            "metrics": record["metrics"],
        }

    @app.post("/v1/sessions/{session_id}/feedback")
    async def add_feedback(session_id: str, request: Request):
        body = await request.json()
        if not isinstance(body, dict):
            raise BadRequest("body must be a JSON object")
        extra = set(body) - {"liked", "disliked"}
        if extra:
            raise BadRequest(f"unknown keys {sorted(extra)}")
        liked = body.get("liked", [])
        disliked = body.get("disliked", [])
        if not isinstance(liked, list) or not isinstance(disliked, list):
            raise BadRequest("liked/disliked must be lists of image ids")
        session = store.get(session_id)
        with store.lock(session_id):
            if session.status == "generating":
                raise Busy(f"session {session_id!r} busy")
            known = {i for r in session.rounds for i in r["image_ids"]}
            for image_id in [*liked, *disliked]:
                if image_id not in known:
                    raise InvalidFeedback(f"image id {image_id!r} not in this session")
            overlap = set(liked) & set(disliked)
            if overlap:
                raise InvalidFeedback(f"ids in both liked and disliked: {sorted(overlap)}")
            session.liked_ids.extend(liked)
            session.disliked_ids.extend(disliked)
            session.updated_at = time.time()
            store.save(session)
            return {
                "liked_count": len(session.liked_ids),
                "disliked_count": len(session.disliked_ids),
                "liked": session.liked_ids,
                "disliked": session.disliked_ids,
            }

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str):
        session = store.get(session_id)
        return session.to_json_dict()

    @app.get("/v1/sessions/{session_id}/images/{image_id}")
    def get_image(session_id: str, image_id: str):
        store.get(session_id)
        return {"id": image_id, "png_base64": _png_base64(store.load_image(session_id, image_id))}

    if ui_dir and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
