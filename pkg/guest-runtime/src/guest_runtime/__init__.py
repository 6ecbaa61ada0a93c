"""Dynamically loading function execution unit for the faasgate wire protocol."""

from .runtime import (
    BootError,
    LoadError,
    LoadedFunction,
    ProtocolError,
    StreamBroken,
    StreamEnded,
    execute,
    load,
    main,
    pack,
    parse_boot,
    read_message,
    serve,
)

__all__ = [
    "BootError",
    "LoadError",
    "LoadedFunction",
    "ProtocolError",
    "StreamBroken",
    "StreamEnded",
    "execute",
    "load",
    "main",
    "pack",
    "parse_boot",
    "read_message",
    "serve",
]
