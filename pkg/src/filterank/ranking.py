"""Serving-time filter ranking: engagement x conversion^exponent, then inventory cut."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import Query
from .features import FeatureBatch, encode
from .model import ModelParams, forward_batch


@dataclass(frozen=True)
class RankingConfig:
    conversion_weight_exponent: float = 2.0
    top_k: int = 6
    min_inventory: int = 18

    def __post_init__(self) -> None:
        if not self.conversion_weight_exponent > 0:
            raise ValueError("conversion_weight_exponent must be > 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.min_inventory < 0:
            raise ValueError("min_inventory must be >= 0")


@dataclass(frozen=True)
class RankedFilter:
    filter_id: int
    score: float
    p_engage: float
    p_book: float
    post_filter_inventory: int

    def to_json(self) -> dict:
        return {
            "filter_id": self.filter_id,
            "score": self.score,
            "p_engage": self.p_engage,
            "p_book": self.p_book,
            "post_filter_inventory": self.post_filter_inventory,
        }


RankedFilters = tuple[RankedFilter, ...]


def ranking_score(p_engage, p_book, exponent: float):
    """``p_engage * p_book ** exponent``; works on scalars and arrays."""
    return p_engage * p_book ** exponent


def rank_candidates(
    scores: Sequence[float],
    p_engage: Sequence[float],
    p_book: Sequence[float],
    facet_counts: Sequence[int],
    cfg: RankingConfig = RankingConfig(),
    applied: Iterable[int] = (),
) -> RankedFilters:
    """Drop applied and low-inventory filters, then take the top ``cfg.top_k``.

    Ties on score go to the lower filter id.
    """
    k = len(scores)
    if len(facet_counts) != k:
        raise ValueError(f"facet_counts has length {len(facet_counts)}, expected {k}")
    skip = set(applied)
    eligible = [i for i in range(k) if i not in skip and facet_counts[i] >= cfg.min_inventory]
    eligible.sort(key=lambda i: (-scores[i], i))
    return tuple(
        RankedFilter(i, float(scores[i]), float(p_engage[i]), float(p_book[i]), int(facet_counts[i]))
        for i in eligible[: cfg.top_k]
    )


def candidate_probs(params: ModelParams, query: Query) -> tuple[np.ndarray, np.ndarray]:
    """Engagement probability and booking probability of every filter for ``query``."""
    k = params.k
    enc = encode(query, params.schema)
    batch = FeatureBatch(
        np.tile(np.asarray(enc.categorical_indices, dtype=np.int64), (k, 1)).reshape(k, len(enc.categorical_indices)),
        np.tile(enc.dense, (k, 1)),
        np.arange(k, dtype=np.int64),
    )
    p_e, p_b = forward_batch(params, batch)
    return p_e[0], p_b


def recommend(
    params: ModelParams,
    query: Query,
    facet_counts: Sequence[int],
    cfg: RankingConfig = RankingConfig(),
    applied_filters: Iterable[int] = (),
) -> RankedFilters:
    if len(facet_counts) != params.k:
        raise ValueError(f"facet_counts has length {len(facet_counts)}, expected {params.k}")
    p_e, p_b = candidate_probs(params, query)
    scores = ranking_score(p_e, p_b, cfg.conversion_weight_exponent)
    return rank_candidates(scores, p_e, p_b, facet_counts, cfg, applied_filters)
