"""HTTP service around the tracker core.

Tracking sessions are stateful: POST /sessions initializes a tracker from
a first frame + box, then each POST /sessions/{id}/track consumes one
frame. All sessions share the read-only model parameters from the served
checkpoint. Frames travel as base64-encoded PNG.
"""

from __future__ import annotations

import base64
import io
from dataclasses import asdict

import numpy as np
from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel, Field

from . import __version__, evaluation as ev, geometry as geo
from . import model as mdl
from . import verify
from .dataio import SynthConfig, gen_synthetic
from .tracking import InitError, Tracker


class BoxModel(BaseModel):
    cx: float
    cy: float
    w: float = Field(ge=0)
    h: float = Field(ge=0)
    frame: str = "pixels"

    def to_bbox(self) -> geo.BBox:
        frame = geo.Frame.PIXELS if self.frame == "pixels" else geo.Frame.NORMALIZED
        return geo.BBox(self.cx, self.cy, self.w, self.h, frame)

    @staticmethod
    def from_bbox(b: geo.BBox) -> "BoxModel":
        return BoxModel(cx=b.cx, cy=b.cy, w=b.w, h=b.h,
                        frame="pixels" if b.frame is geo.Frame.PIXELS
                        else "normalized")


class HealthResponse(BaseModel):
    status: str
    version: str
    model_loaded: bool


class BoxPairRequest(BaseModel):
    a: BoxModel
    b: BoxModel


class BoxPairResponse(BaseModel):
    iou: float
    giou: float


class MetricsRequest(BaseModel):
    ious: list[float]


class MetricsResponse(BaseModel):
    ao: float
    sr50: float
    sr75: float
    success_auc: float


class GradCheckRequest(BaseModel):
    trials: int = Field(default=5, ge=1, le=200)
    toy: bool = False
    seed: int = 0


class GradCheckResponse(BaseModel):
    passed: bool
    lines: list[str]


class SessionInitRequest(BaseModel):
    frame_png: str  # base64 PNG
    box: BoxModel


class SessionInitResponse(BaseModel):
    session_id: str
    n_target_parts: int


class TrackRequest(BaseModel):
    frame_png: str


class TrackResponse(BaseModel):
    box: BoxModel
    coasted: bool
    frame_idx: int


class SessionInfo(BaseModel):
    session_id: str
    frame_idx: int
    last_box: BoxModel


class SynthRequest(BaseModel):
    length: int = Field(default=20, ge=2, le=500)
    seed: int = 0
    canvas: int = Field(default=160, ge=48, le=512)
    deformation: float = Field(default=0.0, ge=0)
    distractors: int = Field(default=0, ge=0, le=8)
    occluder_prob: float = Field(default=0.0, ge=0, le=1)


class SynthResponse(BaseModel):
    name: str
    length: int
    gt: list[BoxModel]


def _decode_frame(data: str) -> np.ndarray:
    try:
        raw = base64.b64decode(data)
        return np.asarray(Image.open(io.BytesIO(raw)).convert("RGB"))
    except Exception as exc:
        raise HTTPException(status_code=422,
                            detail=f"invalid PNG payload: {exc}") from exc


def create_app(checkpoint: str | None = None) -> FastAPI:
    app = FastAPI(title="parttrack", version=__version__)
    app.state.cfg = None
    app.state.params = None
    app.state.sessions = {}
    app.state.next_session = 1
    if checkpoint:
        cfg, params, _ = mdl.load_checkpoint(checkpoint)
        app.state.cfg = cfg
        app.state.params = params

    def require_model():
        if app.state.params is None:
            raise HTTPException(status_code=409, detail="no checkpoint loaded")

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__,
                              model_loaded=app.state.params is not None)

    @app.get("/model")
    def model_info():
        require_model()
        return asdict(app.state.cfg)

    @app.post("/boxes/iou", response_model=BoxPairResponse)
    def box_iou(req: BoxPairRequest):
        a, b = req.a.to_bbox(), req.b.to_bbox()
        if a.frame is not b.frame:
            raise HTTPException(status_code=422, detail="mismatched box frames")
        return BoxPairResponse(iou=geo.iou(a, b), giou=geo.giou(a, b))

    @app.post("/metrics/summary", response_model=MetricsResponse)
    def metrics_summary(req: MetricsRequest):
        if not req.ious:
            raise HTTPException(status_code=422, detail="empty IoU list")
        ao, sr50, sr75 = ev.ao_sr(req.ious)
        _, auc = ev.success_auc(req.ious)
        return MetricsResponse(ao=ao, sr50=sr50, sr75=sr75, success_auc=auc)

    @app.post("/gradcheck", response_model=GradCheckResponse)
    def gradcheck(req: GradCheckRequest):
        lines, ok = verify.run_gradcheck(trials=req.trials, toy=req.toy,
                                         seed=req.seed)
        return GradCheckResponse(passed=ok, lines=lines)

    @app.post("/synth", response_model=SynthResponse)
    def synth(req: SynthRequest):
        cfg = SynthConfig(canvas=req.canvas, deformation=req.deformation,
                          distractors=req.distractors,
                          occluder_prob=req.occluder_prob, seed=req.seed)
        seq = gen_synthetic(cfg, req.length)
        return SynthResponse(name=seq.name, length=len(seq),
                             gt=[BoxModel.from_bbox(b) for b in seq.gt])

    @app.post("/sessions", response_model=SessionInitResponse)
    def open_session(req: SessionInitRequest):
        require_model()
        frame = _decode_frame(req.frame_png)
        tracker = Tracker(app.state.params, app.state.cfg)
        try:
            tracker.init(frame, req.box.to_bbox())
        except InitError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        sid = f"session-{app.state.next_session}"
        app.state.next_session += 1
        app.state.sessions[sid] = tracker
        return SessionInitResponse(
            session_id=sid, n_target_parts=tracker.template_mask.n_target)

    def _get_session(sid: str) -> Tracker:
        tracker = app.state.sessions.get(sid)
        if tracker is None:
            raise HTTPException(status_code=404, detail=f"unknown session {sid}")
        return tracker

    @app.post("/sessions/{sid}/track", response_model=TrackResponse)
    def track(sid: str, req: TrackRequest):
        tracker = _get_session(sid)
        box = tracker.track(_decode_frame(req.frame_png))
        return TrackResponse(box=BoxModel.from_bbox(box),
                             coasted=tracker.coasted,
                             frame_idx=tracker.frame_idx)

    @app.get("/sessions/{sid}", response_model=SessionInfo)
    def session_info(sid: str):
        tracker = _get_session(sid)
        return SessionInfo(session_id=sid, frame_idx=tracker.frame_idx,
                           last_box=BoxModel.from_bbox(tracker.last_box))

    @app.delete("/sessions/{sid}", status_code=204)
    def close_session(sid: str):
        _get_session(sid)
        del app.state.sessions[sid]

    return app
