"""Persistent in-guest session runtime for the sandbox frame protocol."""

from .shim import (
    Frame,
    NamespaceSnapshot,
    PROTOCOL_VERSION,
    SENTINEL_PREFIX,
    ShimSession,
    capture_streams,
    shim_main,
    take_snapshot,
)

__version__ = "0.1.0"
__all__ = [
    "Frame",
    "NamespaceSnapshot",
    "PROTOCOL_VERSION",
    "SENTINEL_PREFIX",
    "ShimSession",
    "capture_streams",
    "shim_main",
    "take_snapshot",
]
