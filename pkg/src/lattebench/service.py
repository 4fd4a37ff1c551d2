"""Local HTTP service: drives the adaptation loop at a paced frame rate and
exposes frames, metrics, an event stream and a prompt-ingestion endpoint."""

from __future__ import annotations

import json
import os
import queue
import threading
import time
from typing import List, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse, StreamingResponse
from pydantic import BaseModel, ConfigDict, Field

from . import synth
from .adapt import build_itta_state, run_adaptation
from .config import RunConfig
from .itta import Prompt, SimulatedPrompter, init_head, warmup_head
from .persist import persist_run


class PromptPayload(BaseModel):
    model_config = ConfigDict(extra="forbid")

    t: int = Field(ge=0)
    class_id: int = Field(ge=0)
    point_indices: List[int]
    box: Optional[dict] = None
    client_id: str = "anonymous"


def frame_payload(frame, record, extras, class_names) -> dict:
    return {
        "t": int(frame.t),
        "points": np.round(frame.points, 3).tolist(),
        "pred_xm": extras["pred_xm"].astype(int).tolist(),
        "pred_2d": extras["pred_2d"].astype(int).tolist(),
        "pred_3d": extras["pred_3d"].astype(int).tolist(),
        "gt": frame.gt.astype(int).tolist(),
        "ent_2d": np.asarray(extras["ent_2d"], dtype=float).tolist(),
        "ent_3d": np.asarray(extras["ent_3d"], dtype=float).tolist(),
        "pose": frame.pose.matrix.reshape(-1).tolist(),
        "classes": list(class_names),
    }


class _PendingPrompt:
    def __init__(self, prompt: Prompt):
        self.prompt = prompt
        self.applied_at = None
        self.done = threading.Event()


class SessionRunner:
    """Owns the adaptation loop thread and the snapshots/queues shared with
    request handlers. Handlers never touch model state."""

    def __init__(self, config: RunConfig, out_dir=None):
        self.config = config
        self.out_dir = out_dir
        self.class_set = synth.DEFAULT_CLASSES
        self.frames = {}
        self.latest_t = -1
        self.metrics = {"t": -1, "miou_xm": None, "miou_2d": None,
                        "miou_3d": None, "per_class_iou": [],
                        "prompts_consumed": 0, "prompts_human": 0,
                        "frames_per_second": 0.0}
        self.prompt_queue: "queue.Queue[_PendingPrompt]" = queue.Queue()
        self.subscribers = []
        self.lock = threading.Lock()
        self.abort = threading.Event()
        self.done = threading.Event()
        self.error = None
        self.log = None
        self._per_frame_budget = 1.0 / config.service.frames_per_second
        self._last_frame_wall = None
        self._fps = 0.0
        self._thread = None

    # -- loop side ----------------------------------------------------------

    def start(self):
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        try:
            cfg = self.config
            spec = cfg.stream_spec()
            world = synth.generate_world(spec.world)
            models = synth.pretrain_source(spec, cfg.model_config_obj(),
                                           steps=cfg.model.pretrain_steps,
                                           seed=cfg.seed,
                                           frame_pool=cfg.model.pretrain_pool)
            adapt_cfg = cfg.adapt_config()
            itta_state, prompt_source = None, None
            if adapt_cfg.with_itta:
                head = init_head(spec.world.feature_dim,
                                 adapt_cfg.itta.bottleneck_dim, seed=cfg.seed)
                warmup_head(head, spec, self.class_set,
                            iterations=cfg.itta.warmup_iterations,
                            seed=cfg.seed, cfg=adapt_cfg.itta)
                itta_state = build_itta_state(models, head, self.class_set,
                                              adapt_cfg.itta, seed=cfg.seed)
                prompt_source = self._make_prompt_source(adapt_cfg)
            stream = self._paced(synth.render_stream(world, spec))
            self.log = run_adaptation(stream, models, adapt_cfg,
                                      prompt_source=prompt_source,
                                      itta_state=itta_state,
                                      on_frame=self._on_frame,
                                      config_hash=cfg.config_hash(),
                                      seed=cfg.seed, abort_flag=self.abort)
            if self.out_dir is not None:
                persist_run(self.log, self.out_dir, cfg.resolved_json())
        except Exception as exc:  # surfaced by /api/metrics and serve()
            self.error = exc
        finally:
            self.done.set()
            self._broadcast(None)

    def _paced(self, stream):
        for frame in stream:
            if self.abort.is_set():
                return
            now = time.monotonic()
            if self._last_frame_wall is not None:
                wait = self._per_frame_budget - (now - self._last_frame_wall)
                if wait > 0:
                    time.sleep(wait)
            self._last_frame_wall = time.monotonic()
            yield frame

    def _make_prompt_source(self, adapt_cfg):
        simulator = None
        if self.config.service.live_prompts in ("simulated", "hybrid"):
            simulator = SimulatedPrompter(self.class_set, adapt_cfg.itta,
                                          seed=self.config.seed)

        def source(frame, head_params):
            if self.config.service.live_prompts != "simulated":
                pending = self._pop_pending(frame.t, adapt_cfg.batch_size)
                if pending is not None:
                    pending.applied_at = int(frame.t)
                    pending.done.set()
                    with self.lock:
                        self.metrics["prompts_human"] += 1
                    return pending.prompt
            if simulator is not None:
                return simulator(frame, head_params)
            return None

        return source

    def _pop_pending(self, t, batch_size):
        kept, hit = [], None
        while True:
            try:
                item = self.prompt_queue.get_nowait()
            except queue.Empty:
                break
            if hit is None and item.prompt.t <= t <= item.prompt.t + batch_size:
                hit = item
            elif t > item.prompt.t + batch_size:
                item.applied_at = None
                item.done.set()  # expired unapplied
            else:
                kept.append(item)
        for item in kept:
            self.prompt_queue.put(item)
        return hit

    def _on_frame(self, frame, record, extras):
        payload = frame_payload(frame, record, extras, self.class_set.names)
        now = time.monotonic()
        with self.lock:
            self.frames[int(frame.t)] = payload
            self.latest_t = int(frame.t)
            n = len(self.log.records) if self.log else 0
            self._fps = (1.0 / max(now - (self._last_frame_wall or now), 1e-9)
                         if n else 0.0)
            self.metrics = {
                "t": int(frame.t),
                "miou_xm": record["miou_xm"],
                "miou_2d": record["miou_2d"],
                "miou_3d": record["miou_3d"],
                "per_class_iou": [None if v is None else float(v)
                                  for v in record["iou"]],
                "prompts_consumed": self.metrics["prompts_consumed"]
                + int(record["n_prompts"]),
                "prompts_human": self.metrics["prompts_human"],
                "frames_per_second": round(min(
                    self._fps, self.config.service.frames_per_second), 3),
            }
            snapshot = dict(self.metrics)
        self._broadcast({"t": int(frame.t), "metrics": snapshot})

    # -- handler side -------------------------------------------------------

    def _broadcast(self, event):
        with self.lock:
            subs = list(self.subscribers)
        for q in subs:
            q.put(event)

    def subscribe(self) -> queue.Queue:
        q = queue.Queue()
        with self.lock:
            self.subscribers.append(q)
        return q

    def unsubscribe(self, q):
        with self.lock:
            if q in self.subscribers:
                self.subscribers.remove(q)

    def submit_prompt(self, payload: PromptPayload, timeout: float = 10.0):
        cfg = self.config
        if not cfg.adapt_config().with_itta:
            raise HTTPException(400, "prompts require an itta-enabled method")
        if cfg.service.live_prompts == "simulated":
            raise HTTPException(400, "service runs with simulated prompts only")
        with self.lock:
            latest = self.latest_t
            frame = self.frames.get(payload.t)
        if payload.t > latest + 2 * cfg.optimizer.batch_size or payload.t < 0:
            raise HTTPException(404, f"unknown frame {payload.t}")
        if latest - payload.t > cfg.optimizer.batch_size:
            raise HTTPException(
                409, f"frame {payload.t} is older than the consumption window")
        n_points = cfg.world.points_per_frame
        if frame is not None:
            n_points = len(frame["points"])
        if payload.class_id not in self.class_set.interest:
            raise HTTPException(400, "class_id is not a class of interest")
        if not payload.point_indices:
            raise HTTPException(400, "point_indices must be non-empty")
        if any(i < 0 or i >= n_points for i in payload.point_indices):
            raise HTTPException(400, "point index out of range for frame")
        box = None
        if payload.box is not None:
            try:
                lo = [float(v) for v in payload.box["min"]]
                hi = [float(v) for v in payload.box["max"]]
            except (KeyError, TypeError, ValueError):
                raise HTTPException(400, "box must carry numeric min/max[3]")
            if len(lo) != 3 or len(hi) != 3 or any(a > b for a, b in zip(lo, hi)):
                raise HTTPException(400, "box min must not exceed max")
            box = (tuple(lo), tuple(hi))
        prompt = Prompt(t=payload.t, class_id=payload.class_id,
                        point_indices=tuple(payload.point_indices), box=box,
                        rho=len(payload.point_indices), simulated=False)
        pending = _PendingPrompt(prompt)
        self.prompt_queue.put(pending)
        applied = pending.done.wait(timeout=timeout)
        if not applied or pending.applied_at is None:
            return {"accepted": False, "applied_at_t": None}
        return {"accepted": True, "applied_at_t": pending.applied_at}


def create_app(config: RunConfig, out_dir=None, runner: SessionRunner = None):
    runner = runner or SessionRunner(config, out_dir=out_dir)
    app = FastAPI(title="lattebench", docs_url=None, redoc_url=None)
    app.state.runner = runner

    @app.on_event("startup")
    def _startup():
        if runner._thread is None:
            runner.start()

    @app.on_event("shutdown")
    def _shutdown():
        runner.abort.set()

    @app.get("/api/frame/latest")
    def latest_frame():
        with runner.lock:
            payload = runner.frames.get(runner.latest_t)
        if payload is None:
            raise HTTPException(404, "no frame has been processed yet")
        return JSONResponse(payload)

    @app.get("/api/frame/{t}")
    def frame_at(t: int):
        with runner.lock:
            payload = runner.frames.get(t)
        if payload is None:
            raise HTTPException(404, f"unknown frame {t}")
        return JSONResponse(payload)

    @app.get("/api/metrics")
    def metrics():
        with runner.lock:
            snapshot = dict(runner.metrics)
        snapshot["done"] = runner.done.is_set()
        if runner.error is not None:
            snapshot["error"] = str(runner.error)
        return JSONResponse(snapshot)

    @app.get("/api/config")
    def resolved_config():
        return JSONResponse(json.loads(config.resolved_json()))

    @app.post("/api/prompt")
    def post_prompt(payload: PromptPayload):
        return JSONResponse(runner.submit_prompt(payload))

    @app.get("/api/events")
    def events():
        q = runner.subscribe()

        def gen():
            try:
                while True:
                    try:
                        event = q.get(timeout=30.0)
                    except queue.Empty:
                        yield ": keep-alive\n\n"
                        continue
                    if event is None:
                        yield "event: end\ndata: {}\n\n"
                        return
                    yield f"data: {json.dumps(event)}\n\n"
            finally:
                runner.unsubscribe(q)

        return StreamingResponse(gen(), media_type="text/event-stream")

    return app


def serve(config: RunConfig, port: int = None, out_dir=None):
    import uvicorn

    port = int(os.environ.get("LATTE_BENCH_PORT", port or config.service.port))
    app = create_app(config, out_dir=out_dir)
    uvicorn.run(app, host=config.service.host, port=port, log_level="warning")
    runner = app.state.runner
    if runner.error is not None:
        raise RuntimeError(f"adaptation loop failed: {runner.error}")
