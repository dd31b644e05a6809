"""Hierarchical heterogeneous horizontal federated learning for EEG data."""
from .errors import (
    ConfigError,
    DataError,
    HHHFLError,
    ParseError,
    PreconditionError,
    ProtocolError,
    SerializationError,
    ShapeError,
)
from .ingest import DeviceKind

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DeviceKind",
    "HHHFLError",
    "ParseError",
    "PreconditionError",
    "ProtocolError",
    "SerializationError",
    "ShapeError",
]
