"""Comparison predictors: windowed Filter Conversion Rate and the necessity heuristic."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from datetime import timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import BookingEvent


@dataclass(frozen=True)
class FcrEntry:
    applied_count: int
    converted_count: int
    fcr: float | None


def _token_list(filters, none_token: int) -> list[int]:
    tokens = [i for i, b in enumerate(filters) if b]
    return tokens or [none_token]


class _FallbackTable:
    """Keyed scores with a (destination, filter) -> filter -> prevalence fallback."""

    entries: dict
    global_scores: dict
    prevalence: float

    def score(self, destination: int, token: int) -> float:
        v = self.local(destination, token)
        if v is not None:
            return v
        g = self.global_scores.get(token)
        if g is not None:
            return g
        return self.prevalence

    def local(self, destination: int, token: int) -> float | None:
        raise NotImplementedError

    def score_rows(self, destinations: Sequence[int], tokens: Sequence[int]) -> np.ndarray:
        return np.array([self.score(d, t) for d, t in zip(destinations, tokens)], dtype=float)


@dataclass
class FcrTable(_FallbackTable):
    """FCR per (destination, filter) over a trailing window.

    ``entries`` maps (destination_id, token) to counts; token ``k`` stands
    for searches with no filter applied.
    """

    entries: dict[tuple[int, int], FcrEntry]
    global_scores: dict[int, float]
    prevalence: float
    window_days: int
    min_support: int
    k: int

    def local(self, destination: int, token: int) -> float | None:
        e = self.entries.get((destination, token))
        return None if e is None else e.fcr

    def to_json(self) -> dict:
        return {
            "window_days": self.window_days,
            "min_support": self.min_support,
            "k": self.k,
            "prevalence": self.prevalence,
            "global": {str(t): v for t, v in sorted(self.global_scores.items())},
            "entries": [
                {"destination_id": d, "filter_id": t, "applied_count": e.applied_count,
                 "converted_count": e.converted_count, "fcr": e.fcr}
                for (d, t), e in sorted(self.entries.items())
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "FcrTable":
        return cls(
            entries={
                (int(e["destination_id"]), int(e["filter_id"])): FcrEntry(
                    int(e["applied_count"]), int(e["converted_count"]), e["fcr"])
                for e in d["entries"]
            },
            global_scores={int(t): float(v) for t, v in d["global"].items()},
            prevalence=float(d["prevalence"]),
            window_days=int(d["window_days"]),
            min_support=int(d["min_support"]),
            k=int(d["k"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FcrTable":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def compute_fcr(examples: Sequence, window_days: int = 7, min_support: int = 20, k: int | None = None) -> FcrTable:
    """Converted searches over searches applying the filter, per (destination, filter).

    ``examples`` are attributed training examples (``booking_label`` is the
    converted flag).  Only searches in the last ``window_days`` days of the
    log count.  Rates backed by fewer than ``min_support`` applications are
    left undefined and fall back to the destination-free rate, then to the
    overall conversion rate.
    """
    if not examples:
        raise ValueError("no examples")
    k = len(examples[0].filters) if k is None else k
    last_day = max(e.query.search_timestamp for e in examples)
    start = last_day - timedelta(days=window_days - 1)
    applied: dict[tuple[int, int], int] = defaultdict(int)
    converted: dict[tuple[int, int], int] = defaultdict(int)
    g_applied: dict[int, int] = defaultdict(int)
    g_converted: dict[int, int] = defaultdict(int)
    n = pos = 0
    for e in examples:
        if e.query.search_timestamp < start:
            continue
        n += 1
        pos += e.booking_label
        for t in _token_list(e.filters, k):
            key = (e.query.location_id, t)
            applied[key] += 1
            converted[key] += e.booking_label
            g_applied[t] += 1
            g_converted[t] += e.booking_label
    entries = {
        key: FcrEntry(cnt, converted[key], converted[key] / cnt if cnt >= min_support else None)
        for key, cnt in applied.items()
    }
    global_scores = {t: g_converted[t] / c for t, c in g_applied.items() if c >= min_support}
    return FcrTable(entries, global_scores, pos / n if n else 0.0, window_days, min_support, k)


@dataclass(frozen=True)
class Journey:
    user_id: int
    destination_id: int
    applied: frozenset[int]
    booked_listing: int | None


def build_journeys(searches: Iterable, bookings: Iterable[BookingEvent]) -> list[Journey]:
    """Group searches per (user, destination); attach the user's uncancelled booking.

    Works on anything carrying ``user_id``, ``query`` and ``filters``
    (search events or training examples).
    """
    booked: dict[int, int] = {}
    for b in sorted(bookings, key=lambda b: (b.user_id, b.booking_date)):
        if not b.cancelled_within_m_days and b.user_id not in booked:
            booked[b.user_id] = b.listing_id
    groups: dict[tuple[int, int], set[int]] = {}
    for s in searches:
        key = (s.user_id, s.query.location_id)
        groups.setdefault(key, set()).update(i for i, bit in enumerate(s.filters) if bit)
    return [
        Journey(uid, dest, frozenset(applied), booked.get(uid))
        for (uid, dest), applied in sorted(groups.items())
    ]


@dataclass
class NecessityTable(_FallbackTable):
    entries: dict[tuple[int, int], float]
    global_scores: dict[int, float]
    prevalence: float

    def local(self, destination: int, token: int) -> float | None:
        return self.entries.get((destination, token))

    def to_json(self) -> dict:
        return {
            "prevalence": self.prevalence,
            "global": {str(t): v for t, v in sorted(self.global_scores.items())},
            "entries": [{"destination_id": d, "filter_id": t, "score": v}
                        for (d, t), v in sorted(self.entries.items())],
        }

    @classmethod
    def from_json(cls, d: dict) -> "NecessityTable":
        return cls(
            entries={(int(e["destination_id"]), int(e["filter_id"])): float(e["score"]) for e in d["entries"]},
            global_scores={int(t): float(v) for t, v in d["global"].items()},
            prevalence=float(d["prevalence"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NecessityTable":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def necessity_scores(journeys: Sequence[Journey], listing_attrs: np.ndarray,
                     prevalence: float | None = None) -> NecessityTable:
    """How often a filter, once applied in a booked journey, holds for the booked listing.

    Population: journeys with an uncancelled booking that applied the filter
    at some point.  Score: share of them whose booked listing has the
    attribute, wherever in the journey the booking came from.
    ``listing_attrs[listing, filter]`` says whether a listing satisfies a
    filter.  Filters never applied in a booked journey get no score.
    ``prevalence`` (default: share of booked journeys) is the last fallback.
    """
    denom: dict[tuple[int, int], int] = defaultdict(int)
    numer: dict[tuple[int, int], int] = defaultdict(int)
    g_denom: dict[int, int] = defaultdict(int)
    g_numer: dict[int, int] = defaultdict(int)
    for j in journeys:
        if j.booked_listing is None:
            continue
        for f in j.applied:
            hit = int(bool(listing_attrs[j.booked_listing, f]))
            denom[(j.destination_id, f)] += 1
            numer[(j.destination_id, f)] += hit
            g_denom[f] += 1
            g_numer[f] += hit
    entries = {key: numer[key] / d for key, d in denom.items()}
    global_scores = {f: g_numer[f] / d for f, d in g_denom.items()}
    if prevalence is None:
        prevalence = float(np.mean([j.booked_listing is not None for j in journeys])) if journeys else 0.0
    return NecessityTable(entries, global_scores, prevalence)
