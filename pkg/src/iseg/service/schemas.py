"""Pydantic request/response models for the session service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field


class VolumePayload(BaseModel):
    raw_b64: str | None = None
    slices_png_b64: list[str] | None = None
    depth: int | None = None
    height: int | None = None
    width: int | None = None


class CreateSessionRequest(BaseModel):
    image_png_b64: str | None = None
    volume: VolumePayload | None = None
    config: dict | None = None


class CreateSessionResponse(BaseModel):
    session_id: str


class ClickRequest(BaseModel):
    slice: int = 0
    row: int
    col: int
    polarity: Literal["positive", "negative"]


class ClickResponse(BaseModel):
    mask_version: int
    iou_hint: float | None = None


class UndoResponse(BaseModel):
    mask_version: int


class PropagateRequest(BaseModel):
    seed_slices: list[int] | None = None


class PropagateResponse(BaseModel):
    job_status: str
    provenance: dict[int, int]


class ClickInfo(BaseModel):
    row: int
    col: int
    polarity: str
    ordinal: int


class PropagationInfo(BaseModel):
    status: str
    seeds: list[int]
    provenance: dict[int, int]


class SessionSummary(BaseModel):
    session_id: str
    kind: str
    depth: int
    height: int
    width: int
    active_slice: int
    clicks: dict[int, list[ClickInfo]] = Field(default_factory=dict)
    mask_versions: dict[int, int] = Field(default_factory=dict)
    propagation: PropagationInfo | None = None
    created_at: str
    updated_at: str
    weights_ref: str


class HealthResponse(BaseModel):
    status: str
