"""FastAPI app: model loaded once at startup, shared read-only by every request."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from contextlib import asynccontextmanager
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from ..model import ModelParams, load, model_version
from ..ranking import RankingConfig, recommend
from .schemas import HealthResponse, RankedFilterModel, RecommendRequest, RecommendResponse

logger = logging.getLogger("filterank.service")

ENV_MODEL = "FILTERANK_MODEL"
ENV_TOP_K = "FILTERANK_TOP_K"
ENV_EXPONENT = "FILTERANK_EXPONENT"
ENV_MIN_INVENTORY = "FILTERANK_MIN_INVENTORY"


class ServiceState:
    def __init__(self, model_path: str | Path | None, cfg: RankingConfig = RankingConfig()):
        self.model_path = None if model_path is None else Path(model_path)
        self.cfg = cfg
        self.params: ModelParams | None = None
        self.version: str | None = None
        self.loaded_at: float | None = None
        self._lock = threading.Lock()
        self.requests = 0
        self.errors = 0

    @property
    def ready(self) -> bool:
        return self.params is not None

    def load(self) -> None:
        """Raises ``ModelFormatError``/``SchemaMismatchError`` on a bad artifact."""
        if self.model_path is None:
            raise RuntimeError("no model path configured")
        params = load(self.model_path).freeze()
        self.version = model_version(self.model_path)
        self.params = params
        self.loaded_at = time.monotonic()
        logger.info(json.dumps({"event": "model_loaded", "version": self.version, "k": params.k}))

    def count(self, error: bool = False) -> None:
        with self._lock:
            self.requests += 1
            self.errors += int(error)


def create_app(model_path: str | Path | None = None, cfg: RankingConfig = RankingConfig(),
               load_on_startup: bool = True) -> FastAPI:
    state = ServiceState(model_path, cfg)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if load_on_startup:
            state.load()  # a bad model aborts startup
        yield
        logger.info(json.dumps({"event": "shutdown", "requests": state.requests}))

    app = FastAPI(title="filterank", lifespan=lifespan)
    app.state.filterank = state

    @app.exception_handler(RequestValidationError)
    async def _invalid(request: Request, exc: RequestValidationError):
        state.count(error=True)
        errors = [{"loc": list(e.get("loc", ())), "msg": e.get("msg", "")} for e in exc.errors()]
        return JSONResponse(status_code=422, content={"detail": "invalid request", "errors": errors})

    @app.get("/health", response_model=HealthResponse)
    async def health():
        if not state.ready:
            return JSONResponse(status_code=503, content=HealthResponse(status="not_ready").model_dump())
        return HealthResponse(
            status="ready",
            model_version=state.version,
            uptime_seconds=time.monotonic() - state.loaded_at,
            k=state.params.k,
            requests=state.requests,
            errors=state.errors,
        )

    @app.post("/recommend", response_model=RecommendResponse)
    async def recommend_endpoint(req: RecommendRequest):
        t0 = time.perf_counter()
        params = state.params
        if params is None:
            state.count(error=True)
            raise HTTPException(status_code=503, detail="model not loaded")
        if len(req.facet_counts) != params.k:
            state.count(error=True)
            raise HTTPException(status_code=422,
                                detail=f"facet_counts has length {len(req.facet_counts)}, expected {params.k}")
        bad = [f for f in req.applied_filters if not 0 <= f < params.k]
        if bad:
            state.count(error=True)
            raise HTTPException(status_code=422, detail=f"applied_filters out of range: {bad}")
        ranked = recommend(params, req.query.to_query(), req.facet_counts, state.cfg, req.applied_filters)
        micros = int((time.perf_counter() - t0) * 1e6)
        state.count()
        logger.info(json.dumps({"event": "recommend", "n": len(ranked), "latency_micros": micros}))
        return RecommendResponse(
            recommendations=[RankedFilterModel(**r.to_json()) for r in ranked],
            model_version=state.version,
            latency_micros=micros,
        )

    return app


def config_from_env(cfg: RankingConfig = RankingConfig()) -> RankingConfig:
    return RankingConfig(
        conversion_weight_exponent=float(os.environ.get(ENV_EXPONENT, cfg.conversion_weight_exponent)),
        top_k=int(os.environ.get(ENV_TOP_K, cfg.top_k)),
        min_inventory=int(os.environ.get(ENV_MIN_INVENTORY, cfg.min_inventory)),
    )


def app_from_env() -> FastAPI:
    """Factory for ``uvicorn --factory`` and multi-worker runs."""
    path = os.environ.get(ENV_MODEL)
    if not path:
        raise RuntimeError(f"{ENV_MODEL} is not set")
    return create_app(path, config_from_env())
