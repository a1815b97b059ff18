"""Input encoding: embeddings indices, z-scored counts and cyclical date pairs."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Query

OOV = 0  # reserved index in every categorical vocabulary

CATEGORICAL = ("location_id", "platform", "device_type")
CONTINUOUS = ("num_adults", "num_children", "num_infants", "num_nights", "lead_time_days")
CYCLICAL = (
    ("checkin_month", 12),
    ("checkin_day_of_month", 31),
    ("checkin_day_of_week", 7),
    ("checkout_month", 12),
    ("checkout_day_of_month", 31),
    ("checkout_day_of_week", 7),
)
EMBEDDING_DIMS = {"location_id": 16, "platform": 4, "device_type": 4}
FILTER_EMBEDDING_DIM = 8

FEATURE_GROUPS = {
    "location": ("location_id",),
    "dates": tuple(name for name, _ in CYCLICAL) + ("num_nights", "lead_time_days"),
    "guest_counts": ("num_adults", "num_children", "num_infants"),
    "platform_device": ("platform", "device_type"),
}


def encode_cyclical(x: float, period: float) -> tuple[float, float]:
    if period <= 0:
        raise ValueError("period must be positive")
    angle = 2.0 * math.pi * x / period
    return math.sin(angle), math.cos(angle)


def raw_value(query: Query, name: str):
    if name in ("location_id", "platform", "device_type"):
        return str(getattr(query, name))
    if name in ("num_adults", "num_children", "num_infants", "num_nights", "lead_time_days"):
        return float(getattr(query, name))
    side, _, part = name.partition("_")
    d = query.checkin_date if side == "checkin" else query.checkout_date
    if part == "month":
        return float(d.month)
    if part == "day_of_month":
        return float(d.day)
    if part == "day_of_week":
        return float(d.weekday())
    raise KeyError(name)


@dataclass(frozen=True)
class CategoricalSpec:
    name: str
    vocabulary: dict[str, int]
    embedding_dim: int

    @property
    def size(self) -> int:
        return len(self.vocabulary) + 1  # + OOV

    def index(self, value: str) -> int:
        return self.vocabulary.get(value, OOV)


@dataclass(frozen=True)
class FeatureSchema:
    categorical: tuple[CategoricalSpec, ...]
    continuous: tuple[tuple[str, float, float], ...]
    cyclical: tuple[tuple[str, float], ...]
    k: int
    filter_embedding_dim: int = FILTER_EMBEDDING_DIM

    def __post_init__(self) -> None:
        if any(std <= 0 for _, _, std in self.continuous):
            raise ValueError("continuous std must be positive")
        if any(period <= 0 for _, period in self.cyclical):
            raise ValueError("cyclical periods must be positive")

    @property
    def dense_dim(self) -> int:
        return len(self.continuous) + 2 * len(self.cyclical)

    @property
    def none_filter(self) -> int:
        """Filter token used for searches with no filter applied."""
        return self.k

    @property
    def input_names(self) -> list[str]:
        return (
            [c.name for c in self.categorical]
            + [name for name, _, _ in self.continuous]
            + [name for name, _ in self.cyclical]
        )

    def to_json(self) -> dict:
        return {
            "categorical": [
                {"name": c.name, "vocabulary": c.vocabulary, "embedding_dim": c.embedding_dim}
                for c in self.categorical
            ],
            "continuous": [{"name": n, "mean": m, "std": s} for n, m, s in self.continuous],
            "cyclical": [{"name": n, "period": p} for n, p in self.cyclical],
            "k": self.k,
            "filter_embedding_dim": self.filter_embedding_dim,
        }

    @classmethod
    def from_json(cls, d: dict) -> "FeatureSchema":
        return cls(
            categorical=tuple(
                CategoricalSpec(c["name"], {str(k): int(v) for k, v in c["vocabulary"].items()},
                                int(c["embedding_dim"]))
                for c in d["categorical"]
            ),
            continuous=tuple((c["name"], float(c["mean"]), float(c["std"])) for c in d["continuous"]),
            cyclical=tuple((c["name"], float(c["period"])) for c in d["cyclical"]),
            k=int(d["k"]),
            filter_embedding_dim=int(d.get("filter_embedding_dim", FILTER_EMBEDDING_DIM)),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class EncodedFeatures:
    categorical_indices: tuple[int, ...]
    dense: np.ndarray
    filter_index: int | None = None


def fit_schema(queries: Iterable, k: int, exclude_groups: Sequence[str] = ()) -> FeatureSchema:
    """Build vocabularies and normalisation statistics from training queries.

    Accepts queries or anything with a ``.query`` attribute.  Features in
    ``exclude_groups`` (keys of ``FEATURE_GROUPS``) are left out entirely.
    """
    qs = [getattr(q, "query", q) for q in queries]
    if not qs:
        raise ValueError("cannot fit a schema on an empty training set")
    unknown = set(exclude_groups) - set(FEATURE_GROUPS)
    if unknown:
        raise ValueError(f"unknown feature groups: {sorted(unknown)}")
    dropped = {name for g in exclude_groups for name in FEATURE_GROUPS[g]}

    categorical = []
    for name in CATEGORICAL:
        if name in dropped:
            continue
        values = sorted({raw_value(q, name) for q in qs})
        vocab = {v: i + 1 for i, v in enumerate(values)}
        categorical.append(CategoricalSpec(name, vocab, EMBEDDING_DIMS[name]))

    continuous = []
    for name in CONTINUOUS:
        if name in dropped:
            continue
        col = np.array([raw_value(q, name) for q in qs], dtype=float)
        mean = float(col.mean())
        std = float(col.std())
        continuous.append((name, mean, std if std > 1e-12 else 1.0))

    cyclical = tuple((name, float(p)) for name, p in CYCLICAL if name not in dropped)
    return FeatureSchema(tuple(categorical), tuple(continuous), cyclical, k)


def encode(query: Query, schema: FeatureSchema, filter_id: int | None = None) -> EncodedFeatures:
    cat = tuple(c.index(raw_value(query, c.name)) for c in schema.categorical)
    dense = []
    for name, mean, std in schema.continuous:
        dense.append((raw_value(query, name) - mean) / std)
    for name, period in schema.cyclical:
        dense.extend(encode_cyclical(raw_value(query, name), period))
    if filter_id is not None and not 0 <= filter_id <= schema.k:
        raise ValueError(f"filter id {filter_id} outside 0..{schema.k}")
    return EncodedFeatures(cat, np.array(dense, dtype=float), filter_id)


@dataclass
class FeatureBatch:
    """Stacked encodings: one row per (query, filter token)."""

    categorical: np.ndarray  # (n, n_categorical) int
    dense: np.ndarray  # (n, dense_dim) float
    filter_index: np.ndarray  # (n,) int, schema.none_filter for no filter

    def __len__(self) -> int:
        return len(self.filter_index)

    def take(self, idx) -> "FeatureBatch":
        return FeatureBatch(self.categorical[idx], self.dense[idx], self.filter_index[idx])

    @classmethod
    def from_encoded(cls, items: Sequence[EncodedFeatures], schema: FeatureSchema) -> "FeatureBatch":
        n = len(items)
        cat = np.array([e.categorical_indices for e in items], dtype=np.int64).reshape(n, len(schema.categorical))
        dense = np.array([e.dense for e in items], dtype=float).reshape(n, schema.dense_dim)
        fidx = np.array(
            [schema.none_filter if e.filter_index is None else e.filter_index for e in items], dtype=np.int64
        )
        return cls(cat, dense, fidx)


def encode_rows(queries: Sequence[Query], filter_ids: Sequence[int | None], schema: FeatureSchema) -> FeatureBatch:
    """Encode many (query, filter) rows; identical queries are encoded once."""
    cache: dict[Query, EncodedFeatures] = {}
    items = []
    for q, f in zip(queries, filter_ids):
        enc = cache.get(q)
        if enc is None:
            enc = cache[q] = encode(q, schema)
        items.append(EncodedFeatures(enc.categorical_indices, enc.dense, f))
    return FeatureBatch.from_encoded(items, schema)
