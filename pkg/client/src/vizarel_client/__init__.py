"""Non-blocking logging client for a vizarel telemetry server."""
from .logger import ConfigurationError, VizarelState

__all__ = ["ConfigurationError", "VizarelState"]
