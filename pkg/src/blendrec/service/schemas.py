"""Pydantic request/response models for the recommendation service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"


class DatasetInfo(BaseModel):
    users: int
    items: int
    interactions: int
    density: float


class InfoResponse(BaseModel):
    dataset: DatasetInfo
    models: list[str]
    clusters: int
    dim: int
    protocol: str
    default_model: str


class ScoredItem(BaseModel):
    rank: int
    item: str
    score: float


class RecommendRequest(BaseModel):
    user: str = Field(description="raw user id as it appears in the dataset")
    n: int = Field(default=10, ge=1, le=1000)
    k_clusters: int | None = Field(default=None, ge=1)
    model: str | None = None
    exclude_seen: bool = True


class RecommendResponse(BaseModel):
    user: str
    model: str
    candidate_count: int
    items: list[ScoredItem]


class RankRequest(BaseModel):
    user: str
    candidates: list[str] = Field(min_length=1)
    model: str | None = None


class RankResponse(BaseModel):
    user: str
    model: str
    items: list[ScoredItem]
