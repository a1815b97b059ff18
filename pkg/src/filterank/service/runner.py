"""Start the service in the foreground or in a background thread."""

from __future__ import annotations

import logging
import os
import socket
import threading
import time
from contextlib import contextmanager
from pathlib import Path

import uvicorn

from ..model import load
from ..ranking import RankingConfig
from .app import ENV_MODEL, config_from_env, create_app

ENV_ADDR = "FILTERANK_ADDR"
ENV_LOG_LEVEL = "FILTERANK_LOG_LEVEL"
DEFAULT_ADDR = "127.0.0.1:8000"


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host, int(port)


def serve(model_path: str | Path, addr: str | None = None, workers: int = 1,
          cfg: RankingConfig | None = None, log_level: str | None = None) -> None:
    """Blocking run.  Env vars override unset address and log level.

    The model is checked here first so a bad artifact stops the process
    before any port is bound.
    """
    load(model_path)
    host, port = parse_addr(addr or os.environ.get(ENV_ADDR, DEFAULT_ADDR))
    level = (log_level or os.environ.get(ENV_LOG_LEVEL, "info")).lower()
    # request log lines are JSON objects on the "filterank.service" logger
    logging.basicConfig(level=level.upper(), format="%(message)s")
    if workers > 1:
        # worker processes rebuild the app from the environment
        os.environ[ENV_MODEL] = str(model_path)
        if cfg is not None:
            os.environ["FILTERANK_EXPONENT"] = str(cfg.conversion_weight_exponent)
            os.environ["FILTERANK_TOP_K"] = str(cfg.top_k)
            os.environ["FILTERANK_MIN_INVENTORY"] = str(cfg.min_inventory)
        uvicorn.run("filterank.service.app:app_from_env", factory=True, host=host, port=port,
                    workers=workers, log_level=level)
    else:
        app = create_app(model_path, cfg or config_from_env())
        uvicorn.run(app, host=host, port=port, log_level=level)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@contextmanager
def background_server(app, host: str = "127.0.0.1", port: int | None = None, timeout: float = 20.0):
    """Run ``app`` on a thread; yields the base URL and stops the server on exit."""
    port = port or free_port()
    server = uvicorn.Server(uvicorn.Config(app, host=host, port=port, log_level="warning", access_log=False))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + timeout
    while not server.started:
        if not thread.is_alive():
            raise RuntimeError("server failed to start")
        if time.monotonic() > deadline:
            server.should_exit = True
            raise TimeoutError("server did not start in time")
        time.sleep(0.02)
    try:
        yield f"http://{host}:{port}"
    finally:
        server.should_exit = True
        thread.join(timeout)
