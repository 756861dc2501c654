"""Request and response bodies for the HTTP service."""

from __future__ import annotations

from typing import Literal, Optional, Union

from pydantic import BaseModel, Field


class Health(BaseModel):
    status: str = "ok"
    model_loaded: bool
    taxonomy_digest: Optional[str] = None
    stage: Optional[int] = None


class NodeOut(BaseModel):
    id: int
    name: str
    level: int
    parent: Optional[int]
    methods: list[int]


class TaxonomyOut(BaseModel):
    digest: str
    nodes: list[NodeOut]


class MetricsRequest(BaseModel):
    scores: list[float] = Field(..., description="fake probability per sample")
    labels: list[int] = Field(..., description="1 for fake, 0 for live")
    threshold: Union[float, Literal["eer"]] = 0.5


class MetricsOut(BaseModel):
    acer: float
    auc: float
    eer: float
    acc: float
    threshold: float
    threshold_policy: str
    eer_threshold: float
    n_live: int
    n_fake: int
    percent: dict[str, float]


class ScoreRequest(BaseModel):
    image: list[list[list[float]]] = Field(..., description="C x H x W pixel values")


class RouteLevel(BaseModel):
    level: int
    node_id: int
    node: str
    distribution: list[float]


class ScoreOut(BaseModel):
    p_live: float
    p_fake: float
    stopped_at_live: bool
    path: list[RouteLevel]
