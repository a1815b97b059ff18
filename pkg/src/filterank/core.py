"""Domain types, the filter catalog and the JSON-lines log formats."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

logger = logging.getLogger(__name__)


class InvalidFilterError(ValueError):
    pass


class InvalidQueryError(ValueError):
    pass


class FilterCategory(str, Enum):
    AMENITY = "amenity"
    BOOKING_OPTION = "booking_option"
    POLICY = "policy"
    OTHER = "other"


@dataclass(frozen=True)
class FilterSpec:
    filter_id: int
    name: str
    category: FilterCategory


@dataclass(frozen=True)
class FilterCatalog:
    filters: tuple[FilterSpec, ...]

    def __post_init__(self) -> None:
        if not self.filters:
            raise ValueError("catalog needs at least one filter")
        ids = [f.filter_id for f in self.filters]
        if ids != list(range(len(ids))):
            raise ValueError("filter ids must be dense 0..k-1 in order")
        names = [f.name for f in self.filters]
        if len(set(names)) != len(names):
            raise ValueError("filter names must be unique")

    @property
    def k(self) -> int:
        return len(self.filters)

    def name_of(self, filter_id: int) -> str:
        return self.filters[filter_id].name

    def to_json(self) -> dict:
        return {
            "filters": [
                {"filter_id": f.filter_id, "name": f.name, "category": f.category.value}
                for f in self.filters
            ]
        }

    @classmethod
    def from_json(cls, payload: dict) -> "FilterCatalog":
        return cls(
            tuple(
                FilterSpec(int(f["filter_id"]), str(f["name"]), FilterCategory(f["category"]))
                for f in payload["filters"]
            )
        )


# Recognisable names first; longer catalogs get generic names.
_KNOWN_FILTERS: list[tuple[str, FilterCategory]] = [
    ("dedicated_workspace", FilterCategory.AMENITY),
    ("washer", FilterCategory.AMENITY),
    ("wifi", FilterCategory.AMENITY),
    ("free_parking", FilterCategory.AMENITY),
    ("hot_tub", FilterCategory.AMENITY),
    ("bbq_grill", FilterCategory.AMENITY),
    ("instant_book", FilterCategory.BOOKING_OPTION),
    ("self_check_in", FilterCategory.BOOKING_OPTION),
    ("free_cancellation", FilterCategory.POLICY),
    ("guest_favorite", FilterCategory.OTHER),
    ("allows_pets", FilterCategory.POLICY),
    ("pool", FilterCategory.AMENITY),
    ("kitchen", FilterCategory.AMENITY),
    ("air_conditioning", FilterCategory.AMENITY),
    ("ev_charger", FilterCategory.AMENITY),
    ("gym", FilterCategory.AMENITY),
    ("crib", FilterCategory.AMENITY),
    ("beachfront", FilterCategory.OTHER),
    ("step_free_access", FilterCategory.OTHER),
    ("smoking_allowed", FilterCategory.POLICY),
]


def default_catalog(k: int = 32) -> FilterCatalog:
    if k < 1:
        raise ValueError("k must be >= 1")
    specs = []
    for i in range(k):
        if i < len(_KNOWN_FILTERS):
            name, cat = _KNOWN_FILTERS[i]
        else:
            name, cat = f"amenity_{i}", FilterCategory.AMENITY
        specs.append(FilterSpec(i, name, cat))
    return FilterCatalog(tuple(specs))


FilterVector = tuple[int, ...]


def make_filter_vector(catalog: FilterCatalog | int, applied_ids: Iterable[int]) -> FilterVector:
    """Binary vector with bit i set iff filter i is applied."""
    k = catalog if isinstance(catalog, int) else catalog.k
    bits = [0] * k
    for i in applied_ids:
        if not 0 <= int(i) < k:
            raise InvalidFilterError(f"filter id {i} outside catalog of size {k}")
        bits[int(i)] = 1
    return tuple(bits)


def f_none(k: int) -> FilterVector:
    return (0,) * k


def applied_ids(vector: FilterVector) -> list[int]:
    return [i for i, b in enumerate(vector) if b]


def union(a: FilterVector, b: FilterVector) -> FilterVector:
    if len(a) != len(b):
        raise InvalidFilterError("filter vectors of different length")
    return tuple(x | y for x, y in zip(a, b))


@dataclass(frozen=True)
class Query:
    location_id: int
    num_adults: int
    num_children: int
    num_infants: int
    checkin_date: date
    checkout_date: date
    platform: str
    device_type: str
    search_timestamp: date

    @property
    def num_nights(self) -> int:
        return (self.checkout_date - self.checkin_date).days

    @property
    def lead_time_days(self) -> int:
        return (self.checkin_date - self.search_timestamp).days

    def to_json(self) -> dict:
        return {
            "location_id": self.location_id,
            "num_adults": self.num_adults,
            "num_children": self.num_children,
            "num_infants": self.num_infants,
            "checkin_date": self.checkin_date.isoformat(),
            "checkout_date": self.checkout_date.isoformat(),
            "platform": self.platform,
            "device_type": self.device_type,
            "search_timestamp": self.search_timestamp.isoformat(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Query":
        return cls(
            location_id=int(d["location_id"]),
            num_adults=int(d["num_adults"]),
            num_children=int(d["num_children"]),
            num_infants=int(d["num_infants"]),
            checkin_date=date.fromisoformat(d["checkin_date"]),
            checkout_date=date.fromisoformat(d["checkout_date"]),
            platform=str(d["platform"]),
            device_type=str(d["device_type"]),
            search_timestamp=date.fromisoformat(d["search_timestamp"]),
        )


def validate_query(q: Query) -> Query:
    if min(q.num_adults, q.num_children, q.num_infants) < 0:
        raise InvalidQueryError("guest counts must be non-negative")
    if q.checkout_date <= q.checkin_date:
        raise InvalidQueryError("checkout must be after checkin")
    if q.checkin_date < q.search_timestamp:
        raise InvalidQueryError("checkin precedes the search date (negative lead time)")
    return q


@dataclass(frozen=True)
class SearchEvent:
    user_id: int
    search_id: int
    query: Query
    filters: FilterVector
    result_listing_ids: tuple[int, ...]
    facet_counts: tuple[int, ...]

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "search_id": self.search_id,
            "query": self.query.to_json(),
            "filters": list(self.filters),
            "result_listing_ids": list(self.result_listing_ids),
            "facet_counts": list(self.facet_counts),
        }

    @classmethod
    def from_json(cls, d: dict) -> "SearchEvent":
        filters = tuple(int(b) for b in d["filters"])
        if any(b not in (0, 1) for b in filters):
            raise ValueError("filter bits must be 0 or 1")
        facets = tuple(int(c) for c in d["facet_counts"])
        if len(facets) != len(filters):
            raise ValueError("facet_counts length differs from filters length")
        return cls(
            user_id=int(d["user_id"]),
            search_id=int(d["search_id"]),
            query=validate_query(Query.from_json(d["query"])),
            filters=filters,
            result_listing_ids=tuple(int(x) for x in d["result_listing_ids"]),
            facet_counts=facets,
        )


@dataclass(frozen=True)
class BookingEvent:
    user_id: int
    listing_id: int
    booking_date: date
    cancelled_within_m_days: bool = False

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "listing_id": self.listing_id,
            "booking_date": self.booking_date.isoformat(),
            "cancelled_within_m_days": self.cancelled_within_m_days,
        }

    @classmethod
    def from_json(cls, d: dict) -> "BookingEvent":
        cancelled = d.get("cancelled_within_m_days", False)
        if not isinstance(cancelled, bool):
            raise ValueError("cancelled_within_m_days must be a boolean")
        return cls(
            user_id=int(d["user_id"]),
            listing_id=int(d["listing_id"]),
            booking_date=date.fromisoformat(d["booking_date"]),
            cancelled_within_m_days=cancelled,
        )


@dataclass
class ReadReport:
    accepted: int = 0
    rejected: int = 0
    rejected_lines: list[int] = field(default_factory=list)


def write_jsonl(path: str | Path, records: Iterable) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            payload = rec.to_json() if hasattr(rec, "to_json") else rec
            fh.write(json.dumps(payload, separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def _iter_jsonl(path: str | Path, parse, report: ReadReport) -> Iterator:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = parse(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                report.rejected += 1
                report.rejected_lines.append(lineno)
                logger.warning("%s:%d rejected: %s", path, lineno, exc)
                continue
            report.accepted += 1
            yield rec


def read_searches(path: str | Path) -> tuple[list[SearchEvent], ReadReport]:
    report = ReadReport()
    return list(_iter_jsonl(path, SearchEvent.from_json, report)), report


def read_bookings(path: str | Path) -> tuple[list[BookingEvent], ReadReport]:
    report = ReadReport()
    return list(_iter_jsonl(path, BookingEvent.from_json, report)), report


def write_catalog(path: str | Path, catalog: FilterCatalog) -> None:
    Path(path).write_text(json.dumps(catalog.to_json(), indent=2), encoding="utf-8")


def read_catalog(path: str | Path) -> FilterCatalog:
    return FilterCatalog.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
