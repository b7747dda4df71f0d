"""Data-efficient Rainbow-style deep Q-learning on CPU-friendly building blocks."""

from fastrainbow.errors import (
    ConfigError,
    DiagnosticsError,
    InputError,
    NotReadyError,
    SnapshotError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DiagnosticsError",
    "InputError",
    "NotReadyError",
    "SnapshotError",
    "StateError",
]
