"""Pydantic request/response models for the edit-exploration API."""

from __future__ import annotations

from pydantic import BaseModel, Field


class CreateSessionRequest(BaseModel):
    target_text: str = Field(min_length=1)
    image_id: str | None = None  # a sprite caption to render as the input
    image_png_base64: str | None = None  # or an uploaded 32px PNG
    edit: dict | None = None  # optional EditConfig overrides


class CreateSessionResponse(BaseModel):
    session_id: str


class StageFlags(BaseModel):
    a: bool
    b: bool
    c: bool


class RenderMetrics(BaseModel):
    eta: float
    seed: int
    alignment: float
    fidelity_psnr: float
    oracle_caption: str
    recommended: bool


class SessionSummary(BaseModel):
    session_id: str
    target_caption: str
    stages: StageFlags
    job_state: str  # queued | running | done | failed | none
    job_error: str | None = None


class SessionDetail(SessionSummary):
    seeds: list[int]
    default_eta: float
    metrics: list[RenderMetrics]
    cached_renders: list[dict]


class SweepRowModel(BaseModel):
    eta: float
    mean_alignment: float
    mean_fidelity: float
    n: int
    seeds: list[int]


class SweepResponse(BaseModel):
    session_id: str
    rows: list[SweepRowModel]


class HealthResponse(BaseModel):
    status: str
    sessions: int
    job_state: str
