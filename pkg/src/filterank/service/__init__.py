"""HTTP service around ``recommend``."""

from .app import ServiceState, create_app

__all__ = ["ServiceState", "create_app"]
