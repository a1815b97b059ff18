"""Booking attribution: turn search and booking logs into labeled examples."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from datetime import timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import BookingEvent, FilterVector, Query, SearchEvent

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttributionConfig:
    # Defaults are arbitrary; the method names the windows without values.
    lookback_days: int = 14
    cancellation_days: int = 30

    def __post_init__(self) -> None:
        if self.lookback_days < 0 or self.cancellation_days < 0:
            raise ValueError("attribution windows must be non-negative")


@dataclass(frozen=True)
class TrainingExample:
    user_id: int
    search_id: int
    query: Query
    filters: FilterVector
    booking_label: int
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.booking_label not in (0, 1):
            raise ValueError("booking_label must be 0 or 1")

    @property
    def engagement_labels(self) -> FilterVector:
        return self.filters

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "search_id": self.search_id,
            "query": self.query.to_json(),
            "filters": list(self.filters),
            "engagement_labels": list(self.filters),
            "booking_label": self.booking_label,
            "weight": self.weight,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainingExample":
        filters = tuple(int(b) for b in d["filters"])
        if "engagement_labels" in d and tuple(int(b) for b in d["engagement_labels"]) != filters:
            raise ValueError("engagement_labels must equal filters")
        return cls(
            user_id=int(d["user_id"]),
            search_id=int(d["search_id"]),
            query=Query.from_json(d["query"]),
            filters=filters,
            booking_label=int(d["booking_label"]),
            weight=float(d.get("weight", 1.0)),
        )


def attribute(
    searches: Iterable[SearchEvent],
    bookings: Iterable[BookingEvent],
    cfg: AttributionConfig = AttributionConfig(),
) -> list[TrainingExample]:
    """Label every search by whether an uncancelled booking is attributable to it.

    A booking attributes to a search of the same user issued on the booking
    day or up to ``cfg.lookback_days`` before it, provided the booked listing
    appears among that search's results.  One booking may label several
    searches.  Output order follows the input search order.
    """
    by_user: dict[int, list[BookingEvent]] = defaultdict(list)
    for b in bookings:
        if not b.cancelled_within_m_days:
            by_user[b.user_id].append(b)
    examples = []
    for s in searches:
        label = 0
        user_bookings = by_user.get(s.user_id)
        if user_bookings:
            shown = set(s.result_listing_ids)
            day = s.query.search_timestamp
            horizon = day + timedelta(days=cfg.lookback_days)
            for b in user_bookings:
                if day <= b.booking_date <= horizon and b.listing_id in shown:
                    label = 1
                    break
        examples.append(TrainingExample(s.user_id, s.search_id, s.query, s.filters, label))
    return examples


def split_dataset(
    examples: Sequence[TrainingExample], train_frac: float = 0.8, seed: int = 0
) -> tuple[list[TrainingExample], list[TrainingExample]]:
    """Split by user so that a user's whole journey lands on one side."""
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must be in (0, 1)")
    if not examples:
        raise ValueError("cannot split an empty dataset")
    users = sorted({e.user_id for e in examples})
    rng = np.random.default_rng(seed)
    in_train = dict(zip(users, rng.random(len(users)) < train_frac))
    train = [e for e in examples if in_train[e.user_id]]
    held = [e for e in examples if not in_train[e.user_id]]
    return train, held


def positive_rate(examples: Sequence[TrainingExample]) -> float:
    return float(np.mean([e.booking_label for e in examples])) if examples else 0.0


def write_examples(path: str | Path, examples: Iterable[TrainingExample]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(json.dumps(e.to_json(), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def read_examples(path: str | Path) -> list[TrainingExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(TrainingExample.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                logger.warning("%s:%d rejected: %s", path, lineno, exc)
    return out

