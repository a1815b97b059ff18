"""Closed-loop load generator: latency percentiles for ``POST /recommend``."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, timedelta

import httpx
import numpy as np

from ..features import FeatureSchema
from ..synthgen import MarketplaceWorld, sample_query
from .schemas import QueryModel


def make_requests(schema: FeatureSchema, n: int, seed: int = 0, world: MarketplaceWorld | None = None) -> list[dict]:
    """Random request bodies.  With a world, queries and facet counts follow it."""
    rng = np.random.default_rng(seed)
    k = schema.k
    vocab = {c.name: sorted(c.vocabulary) for c in schema.categorical}
    out = []
    for _ in range(n):
        if world is not None:
            seg = world.segments[int(rng.integers(len(world.segments)))]
            q = sample_query(world, seg, date(2025, 1, 1) + timedelta(days=int(rng.integers(60))), rng)
            query = QueryModel.from_query(q).model_dump(mode="json")
            facets = world.facet_counts(q.location_id, np.zeros(k, dtype=int)).tolist()
        else:
            day = date(2025, 1, 1) + timedelta(days=int(rng.integers(365)))
            checkin = day + timedelta(days=int(rng.integers(0, 120)))
            query = {
                "location_id": int(rng.choice(vocab.get("location_id", ["0"]))),
                "num_adults": int(rng.integers(1, 7)),
                "num_children": int(rng.integers(0, 3)),
                "num_infants": int(rng.integers(0, 2)),
                "checkin_date": checkin.isoformat(),
                "checkout_date": (checkin + timedelta(days=int(rng.integers(1, 30)))).isoformat(),
                "platform": str(rng.choice(vocab.get("platform", ["web"]))),
                "device_type": str(rng.choice(vocab.get("device_type", ["desktop"]))),
                "search_timestamp": day.isoformat(),
            }
            facets = rng.integers(0, 200, size=k).tolist()
        applied = sorted(set(rng.integers(0, k, size=int(rng.integers(0, 3))).tolist()))
        out.append({"query": query, "applied_filters": applied, "facet_counts": facets})
    return out


@dataclass
class LoadReport:
    requests: int
    errors: int
    concurrency: int
    wall_seconds: float
    latencies_ms: np.ndarray = field(repr=False)
    server_micros: np.ndarray = field(repr=False)
    responses: list = field(default_factory=list, repr=False)

    def pct(self, q: float) -> float:
        return float(np.percentile(self.latencies_ms, q)) if len(self.latencies_ms) else float("nan")

    @property
    def qps(self) -> float:
        return self.requests / self.wall_seconds if self.wall_seconds > 0 else 0.0

    def to_json(self) -> dict:
        srv = self.server_micros
        return {
            "requests": self.requests,
            "errors": self.errors,
            "concurrency": self.concurrency,
            "qps": round(self.qps, 1),
            "latency_ms": {f"p{q}": round(self.pct(q), 3) for q in (50, 90, 99)}
            | {"max": round(float(self.latencies_ms.max()), 3) if len(self.latencies_ms) else None},
            # time inside the handler, excluding HTTP and JSON overhead
            "handler_micros": {
                "p50": float(np.percentile(srv, 50)) if len(srv) else None,
                "p99": float(np.percentile(srv, 99)) if len(srv) else None,
            },
        }


def run_loadtest(url: str, payloads: list[dict], concurrency: int = 1, warmup: int = 50,
                 keep_responses: bool = False, timeout: float = 10.0) -> LoadReport:
    """Send every payload once (after ``warmup`` untimed requests), ``concurrency`` at a time."""
    endpoint = url.rstrip("/") + "/recommend"
    with httpx.Client(timeout=timeout) as c:
        for p in payloads[:warmup]:
            c.post(endpoint, json=p)

    def worker(chunk: list[tuple[int, dict]]):
        out = []
        with httpx.Client(timeout=timeout) as client:
            for i, p in chunk:
                t0 = time.perf_counter()
                r = client.post(endpoint, json=p)
                dt = (time.perf_counter() - t0) * 1e3
                out.append((i, dt, r.status_code, r.json() if r.status_code == 200 else None))
        return out

    indexed = list(enumerate(payloads))
    chunks = [indexed[i::concurrency] for i in range(concurrency)]
    t0 = time.perf_counter()
    with ThreadPoolExecutor(concurrency) as pool:
        results = [x for part in pool.map(worker, chunks) for x in part]
    wall = time.perf_counter() - t0
    results.sort(key=lambda x: x[0])
    lat = np.array([r[1] for r in results])
    ok = [r[3] for r in results if r[2] == 200]
    return LoadReport(
        requests=len(results),
        errors=sum(r[2] != 200 for r in results),
        concurrency=concurrency,
        wall_seconds=wall,
        latencies_ms=lat,
        server_micros=np.array([r["latency_micros"] for r in ok], dtype=float),
        responses=[r[3] for r in results] if keep_responses else [],
    )
