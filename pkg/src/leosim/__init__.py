"""Deterministic desk-scale simulator of task management in grid LEO constellations."""

__version__ = "0.1.0"

from .config import RunConfig, load_config

__all__ = ["RunConfig", "load_config", "__version__"]
