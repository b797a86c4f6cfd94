"""Hierarchical compare-aggregate question answering over plot summaries."""

__version__ = "0.1.0"

from .errors import (
    CaqaError,
    CheckpointError,
    ConfigError,
    CorpusError,
    DivergenceError,
    ReportError,
    ShapeError,
)

__all__ = [
    "CaqaError",
    "CheckpointError",
    "ConfigError",
    "CorpusError",
    "DivergenceError",
    "ReportError",
    "ShapeError",
    "__version__",
]
