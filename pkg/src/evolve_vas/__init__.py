"""EV charger value-added-service platform over emulated PLC and cellular links."""
from .errors import EvolveError
from .link import (
    KB,
    MB,
    MiB,
    EmulatedLink,
    LinkProfile,
    Measurement,
    TransportModel,
    effective_rate,
    get_profile,
    model_transfer_time,
    open_link,
)
from .platform import Platform, build_platform

__all__ = [
    "EvolveError", "KB", "MB", "MiB", "EmulatedLink", "LinkProfile", "Measurement", "TransportModel",
    "effective_rate", "get_profile", "model_transfer_time", "open_link", "Platform", "build_platform",
]
__version__ = "0.1.0"
