"""HTTP surface of the interactive segmentation engine.

REST over JSON with binary PNG mask responses; see schemas for the
request/response models. One weight set is loaded at startup and shared
read-only across sessions.
"""

from __future__ import annotations

import base64
import binascii
import io
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.responses import JSONResponse
from PIL import Image

from ..errors import DivisibilityViolation, IsegError
from ..model import ModelConfig
from ..propagation import PropagationConfig
from .schemas import ClickRequest, ClickResponse, CreateSessionRequest, \
    CreateSessionResponse, HealthResponse, PropagateRequest, \
    PropagateResponse, PropagationInfo, SessionSummary, UndoResponse
from .store import ConflictError, DEFAULT_MAX_PAYLOAD, Session, SessionNotFound, \
    SessionStore, UnprocessableError


def _decode_png_gray(data_b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(data_b64, validate=True)
    except (binascii.Error, ValueError) as e:
        raise HTTPException(400, f"invalid base64: {e}") from e
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except Exception as e:
        raise HTTPException(400, f"invalid image payload: {e}") from e
    return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def _decode_volume(payload) -> np.ndarray:
    if payload.slices_png_b64:
        slices = [_decode_png_gray(s) for s in payload.slices_png_b64]
        first = slices[0].shape
        if any(s.shape != first for s in slices):
            raise HTTPException(400, "volume slices have mixed dimensions")
        return np.stack(slices)
    if payload.raw_b64:
        if not all(isinstance(v, int) and v > 0 for v in
                   (payload.depth, payload.height, payload.width)):
            raise HTTPException(400, "raw volume needs depth/height/width")
        try:
            raw = np.frombuffer(base64.b64decode(payload.raw_b64, validate=True),
                                dtype=np.uint8)
        except (binascii.Error, ValueError) as e:
            raise HTTPException(400, f"invalid base64: {e}") from e
        expect = payload.depth * payload.height * payload.width
        if raw.size != expect:
            raise HTTPException(400, f"raw volume holds {raw.size} voxels, "
                                     f"dims imply {expect}")
        vol = raw.reshape(payload.depth, payload.height, payload.width)
        return vol.astype(np.float64) / 255.0
    raise HTTPException(400, "volume payload needs slices_png_b64 or raw_b64")


def create_app(weights, model_config: ModelConfig, data_dir: str | Path,
               weights_ref: str = "weights",
               prop_defaults: PropagationConfig | None = None,
               cors_origin: str | None = None,
               max_payload: int = DEFAULT_MAX_PAYLOAD) -> FastAPI:
    app = FastAPI(title="iseg session service")
    store = SessionStore(data_dir, weights, model_config,
                         weights_ref=weights_ref, prop_defaults=prop_defaults)
    app.state.store = store

    if cors_origin:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(CORSMiddleware, allow_origins=[cors_origin],
                           allow_methods=["*"], allow_headers=["*"],
                           expose_headers=["ETag"])

    @app.middleware("http")
    async def payload_limit(request: Request, call_next):
        length = request.headers.get("content-length")
        if length and int(length) > max_payload:
            return JSONResponse({"detail": "payload too large"}, status_code=413)
        return await call_next(request)

    @app.exception_handler(IsegError)
    async def iseg_error(request: Request, exc: IsegError):
        status = 500
        if isinstance(exc, SessionNotFound):
            status = 404
        elif isinstance(exc, ConflictError):
            status = 409
        elif isinstance(exc, (UnprocessableError,)):
            status = 422
        elif isinstance(exc, DivisibilityViolation):
            status = 400
        return JSONResponse({"detail": str(exc)}, status_code=status)

    def _get_session(session_id: str) -> Session:
        return store.get(session_id)

    @app.get("/healthz", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok")

    @app.post("/sessions", response_model=CreateSessionResponse, status_code=201)
    def create_session(req: CreateSessionRequest) -> CreateSessionResponse:
        if (req.image_png_b64 is None) == (req.volume is None):
            raise HTTPException(400, "provide exactly one of image or volume")
        if req.image_png_b64 is not None:
            image = _decode_png_gray(req.image_png_b64)
            volume = image[None, :, :]
            kind = "image"
        else:
            volume = _decode_volume(req.volume)
            kind = "volume"
        session = store.create(volume, kind, config=req.config)
        return CreateSessionResponse(session_id=session.id)

    @app.post("/sessions/{session_id}/clicks", response_model=ClickResponse)
    def add_click(session_id: str, req: ClickRequest) -> ClickResponse:
        session = _get_session(session_id)
        version = store.add_click(session, req.slice, req.row, req.col,
                                  req.polarity)
        return ClickResponse(mask_version=version, iou_hint=None)

    @app.delete("/sessions/{session_id}/clicks/last", response_model=UndoResponse)
    def undo_click(session_id: str, slice: int = 0) -> UndoResponse:
        session = _get_session(session_id)
        return UndoResponse(mask_version=store.undo_click(session, slice))

    @app.get("/sessions/{session_id}/mask")
    def get_mask(session_id: str, slice: int = 0,
                 version: int | None = None) -> Response:
        session = _get_session(session_id)
        png, v = store.mask_png(session, slice, version)
        return Response(content=png, media_type="image/png",
                        headers={"ETag": str(v)})

    @app.post("/sessions/{session_id}/propagate", response_model=PropagateResponse)
    def propagate(session_id: str, req: PropagateRequest | None = None
                  ) -> PropagateResponse:
        session = _get_session(session_id)
        seeds = req.seed_slices if req else None
        provenance = store.propagate(session, seeds)
        return PropagateResponse(job_status="done", provenance=provenance)

    @app.get("/sessions/{session_id}", response_model=SessionSummary)
    def get_session(session_id: str) -> SessionSummary:
        session = _get_session(session_id)
        with session.lock:
            clicks = {k: [{"row": c.row, "col": c.col, "polarity": c.polarity,
                           "ordinal": c.ordinal} for c in v]
                      for k, v in session.clicks.items() if v}
            versions = {k: session.version_of(k) for k in range(session.depth)}
            prop = session.propagation
            summary = SessionSummary(
                session_id=session.id,
                kind=session.kind,
                depth=session.depth,
                height=session.height,
                width=session.width,
                active_slice=session.active_slice,
                clicks=clicks,
                mask_versions=versions,
                propagation=PropagationInfo(
                    status=prop["status"], seeds=prop["seeds"],
                    provenance={int(k): v
                                for k, v in prop["provenance"].items()})
                if prop else None,
                created_at=session.created_at,
                updated_at=session.updated_at,
                weights_ref=session.weights_ref,
            )
        return summary

    return app


def create_app_from_weights(weights_path: str | Path, data_dir: str | Path,
                            cors_origin: str | None = None,
                            feature_source: str = "raw_patch") -> FastAPI:
    from ..training import load_model_weights

    weights, config = load_model_weights(weights_path)
    prop = PropagationConfig(feature_source=feature_source)
    return create_app(weights, config, data_dir,
                      weights_ref=Path(weights_path).name,
                      prop_defaults=prop, cors_origin=cors_origin)
