from __future__ import annotations

from datetime import date
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..core import Query


class QueryModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    location_id: int
    num_adults: int = Field(ge=0)
    num_children: int = Field(0, ge=0)
    num_infants: int = Field(0, ge=0)
    checkin_date: date
    checkout_date: date
    platform: str
    device_type: str
    search_timestamp: date

    @model_validator(mode="after")
    def _dates(self) -> "QueryModel":
        if self.checkout_date <= self.checkin_date:
            raise ValueError("checkout_date must be after checkin_date")
        if self.checkin_date < self.search_timestamp:
            raise ValueError("checkin_date precedes search_timestamp")
        return self

    def to_query(self) -> Query:
        return Query(**self.model_dump())

    @classmethod
    def from_query(cls, q: Query) -> "QueryModel":
        return cls(**q.__dict__)


class RecommendRequest(BaseModel):
    query: QueryModel
    applied_filters: List[int] = Field(default_factory=list)
    facet_counts: List[int] = Field(description="Listings left if each filter were added; length k")

    @model_validator(mode="after")
    def _counts(self) -> "RecommendRequest":
        if any(c < 0 for c in self.facet_counts):
            raise ValueError("facet_counts must be non-negative")
        return self


class RankedFilterModel(BaseModel):
    filter_id: int
    score: float
    p_engage: float
    p_book: float
    post_filter_inventory: int


class RecommendResponse(BaseModel):
    recommendations: List[RankedFilterModel]
    model_version: str
    latency_micros: int


class HealthResponse(BaseModel):
    status: str
    model_version: Optional[str] = None
    uptime_seconds: Optional[float] = None
    k: Optional[int] = None
    requests: int = 0
    errors: int = 0
