"""HTTP labeling backend for interactive annotation.

Wraps a suspendable ``ActiveSession`` behind four JSON endpoints:

    POST /sessions                  create a session from a task + budget
    GET  /sessions/{id}/queries     pending queries as renderable payloads
    POST /sessions/{id}/labels      submit one label (idempotent)
    GET  /sessions/{id}/status      poll-safe snapshot + final metrics

The loop itself trains on full-precision data; the 8-bit PNG payloads are
presentation-only. All session mutations are serialized per session, so
concurrent submissions can never be lost or double-applied.
"""

from __future__ import annotations

import base64
import io
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel, Field

from .active import ActiveConfig, ActiveSession
from .model import Params

__all__ = ["ServiceRuntime", "LabelSession", "create_app"]


# ---------------------------------------------------------------------------
# session wrapper
# ---------------------------------------------------------------------------

@dataclass
class LabelSession:
    """One annotation session: the suspended loop plus label bookkeeping."""

    session_id: str
    session: ActiveSession
    budget: int
    status: str = "awaiting_labels"  # awaiting_labels | adapting | done
    received: dict = field(default_factory=dict)  # sample_id -> label (round)
    submissions: list = field(default_factory=list)  # full audit log
    lock: threading.Lock = field(default_factory=threading.Lock)

    def pending_payload(self) -> list:
        """Pending queries ordered by descending entropy (seed round keeps
        its original order: entropies are not defined yet)."""
        items = [
            (i, self.session.pending_scores.get(i)) for i in self.session.pending
        ]
        if all(e is not None for _, e in items):
            items.sort(key=lambda t: (-t[1], t[0]))
        return items


class ServiceRuntime:
    """Shared immutable inputs: the model, meta weights, and labelable tasks."""

    def __init__(self, model, theta: Params, tasks: list,
                 label_names: dict | None = None):
        self.model = model
        self.theta = theta
        self.tasks = list(tasks)
        self.label_names = label_names or {0: "other", 1: "target cell type"}
        self.sessions: dict = {}
        self._registry_lock = threading.Lock()


# ---------------------------------------------------------------------------
# payload rendering
# ---------------------------------------------------------------------------

def _png_b64(img: np.ndarray) -> str:
    """8-bit PNG from a [H,W] (grayscale) or [H,W,3] (RGB) float array."""
    arr = np.clip(img, 0.0, 1.0)
    data = (arr * 255.0).round().astype(np.uint8)
    pil = Image.fromarray(data, mode="L" if data.ndim == 2 else "RGB")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _sample_payload(task, sample_id: int, entropy) -> dict:
    patch = task.patches[sample_id]
    channels = [
        {"name": f"channel-{c}", "png_base64": _png_b64(patch[:, :, c])}
        for c in range(patch.shape[-1])
    ]
    # composite: the three most contrast-rich channels mapped to RGB
    stds = patch.std(axis=(0, 1))
    top3 = sorted(np.argsort(-stds)[:3].tolist())
    composite = np.stack([patch[:, :, c] for c in top3], axis=-1)
    return {
        "sample_id": int(sample_id),
        "entropy": entropy,
        "channels": channels,
        "composite_png_base64": _png_b64(composite),
        "composite_channels": [int(c) for c in top3],
    }


# ---------------------------------------------------------------------------
# request/response models
# ---------------------------------------------------------------------------

class CreateSessionRequest(BaseModel):
    task: int = 0
    budget: int = 16
    seed: int = 0
    t_passes: int = 20
    query_batch: int = 2


class LabelRequest(BaseModel):
    sample_id: int
    label: int = Field(ge=0, le=1)
    annotator: str = "anonymous"


# ---------------------------------------------------------------------------
# app factory
# ---------------------------------------------------------------------------

def create_app(runtime: ServiceRuntime | None = None, *, config_path=None,
               seed: int = 0, desk_scale: bool = True,
               state_dir: str | None = None) -> FastAPI:
    """Build the FastAPI app. Tests inject a ``runtime``; the CLI builds one
    from a config file plus a meta-training state directory."""
    if runtime is None:
        runtime = _runtime_from_cli(config_path, seed, desk_scale, state_dir)
    app = FastAPI(title="annotation-service")
    app.state.runtime = runtime

    def _get(session_id: str) -> LabelSession:
        ls = runtime.sessions.get(session_id)
        if ls is None:
            raise HTTPException(status_code=404,
                                detail=f"unknown session {session_id}")
        return ls

    @app.post("/sessions")
    def create_session(req: CreateSessionRequest):
        if not 0 <= req.task < len(runtime.tasks):
            raise HTTPException(
                status_code=422,
                detail=f"task index {req.task} outside 0..{len(runtime.tasks) - 1}",
            )
        try:
            cfg = ActiveConfig(budget=req.budget, t_passes=req.t_passes,
                               query_batch=req.query_batch)
            session = ActiveSession(runtime.model, runtime.theta,
                                    runtime.tasks[req.task], cfg, seed=req.seed)
        except Exception as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        ls = LabelSession(session_id=uuid.uuid4().hex, session=session,
                          budget=req.budget)
        with runtime._registry_lock:
            runtime.sessions[ls.session_id] = ls
        return {"session_id": ls.session_id, "status": ls.status,
                "pending": [int(i) for i in session.pending],
                "label_names": runtime.label_names}

    @app.get("/sessions/{session_id}/queries")
    def serve_query_batch(session_id: str):
        ls = _get(session_id)
        with ls.lock:
            if ls.status == "done":
                return {"status": "done", "queries": [],
                        "metrics": ls.session.metrics()}
            task = ls.session.task
            queries = [_sample_payload(task, i, e)
                       for i, e in ls.pending_payload()
                       if i not in ls.received]
            return {
                "status": ls.status if queries else "adapting",
                "queries": queries,
                "progress": {
                    "labeled": len(ls.session.pool.labeled),
                    "budget": ls.budget,
                },
            }

    @app.post("/sessions/{session_id}/labels")
    def submit_label(session_id: str, req: LabelRequest):
        ls = _get(session_id)
        with ls.lock:
            if ls.status == "done":
                raise HTTPException(status_code=409,
                                    detail="session is finished")
            sid = int(req.sample_id)
            if sid not in ls.session.pending:
                raise HTTPException(
                    status_code=409,
                    detail=f"sample {sid} is not pending in this session",
                )
            if sid in ls.received:
                return {"accepted": False, "conflict": True,
                        "retained_label": ls.received[sid],
                        "status": ls.status}
            ls.received[sid] = int(req.label)
            ls.submissions.append({
                "sample_id": sid, "label": int(req.label),
                "annotator": req.annotator, "timestamp": time.time(),
            })
            if set(ls.received) >= set(ls.session.pending):
                ls.status = "adapting"
                ls.session.submit_labels(dict(ls.received))
                ls.received = {}
                ls.status = "done" if ls.session.done else "awaiting_labels"
            return {"accepted": True, "conflict": False, "status": ls.status}

    @app.get("/sessions/{session_id}/status")
    def session_status(session_id: str):
        ls = _get(session_id)
        with ls.lock:
            out = {
                "status": ls.status,
                "history": list(ls.session.pool.history),
                "progress": {
                    "labeled": len(ls.session.pool.labeled),
                    "budget": ls.budget,
                },
                "pending": [int(i) for i in ls.session.pending
                            if i not in ls.received],
            }
            if ls.status == "done":
                out["metrics"] = ls.session.metrics()
            return out

    return app


def _runtime_from_cli(config_path, seed, desk_scale, state_dir) -> ServiceRuntime:
    from . import tensor as T
    from .bench import make_world
    from .cli import _load_config, _meta_config
    from .meta import load_state

    if state_dir is None:
        raise T.ParameterError("serve needs --state-dir with trained weights")
    cfg = _load_config(config_path)
    section = dict(cfg.get("synthetic", {}))
    if "patch" in section:
        section["patch"] = tuple(section["patch"])
    world = make_world(seed=seed, meta_config=_meta_config(cfg, desk_scale),
                       **section)
    state = load_state(state_dir)
    return ServiceRuntime(world.model, state.params, world.real_tasks)
