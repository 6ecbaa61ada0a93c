"""Frame codec shared by every TCP connection in the system.

Wire format: a 4-byte big-endian unsigned payload length, followed by the
payload itself, which is the UTF-8 encoding of the message as a canonical
JSON object (keys sorted, no insignificant whitespace). Messages are
"value maps": string-keyed trees of strings, finite numbers, booleans,
nulls, lists and maps. The codec is pure and safe to call from any thread.
"""

from __future__ import annotations

import json
import math
import struct
from typing import Any, Callable

DEFAULT_MAX_FRAME = 16 * 1024 * 1024
HEADER_SIZE = 4

_HEADER = struct.Struct(">I")


class FrameError(Exception):
    """Base class for every framing/codec failure."""

    # Whether the stream position is still a frame boundary after this error,
    # i.e. a server may keep reading the same connection.
    stream_recoverable = False


class CodecError(FrameError):
    """Unencodable value on encode, or malformed payload on decode.

    On decode the bad payload has been fully consumed, so the next byte on the
    stream is the next frame header and the connection stays usable.
    """

    stream_recoverable = True


class IncompleteFrameError(FrameError):
    """The stream ended mid-frame."""


class ConnectionClosed(IncompleteFrameError):
    """The stream ended cleanly on a frame boundary (no bytes of a new frame)."""


class OversizeFrameError(FrameError):
    """Declared payload length exceeds the configured maximum.

    Raised before the payload is read; the unread bytes make the stream
    unrecoverable.
    """


def _check_value(value: Any, path: str) -> None:
    # bool must be tested before int: True is an int in Python
    if value is None or isinstance(value, (str, bool)):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise CodecError(f"non-finite number at {path or '<root>'}")
        return
    if isinstance(value, int):
        return
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _check_value(item, f"{path}[{i}]")
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise CodecError(f"non-string map key {key!r} at {path or '<root>'}")
            _check_value(item, f"{path}.{key}" if path else key)
        return
    raise CodecError(f"unsupported value type {type(value).__name__} at {path or '<root>'}")


def canonical_json(message: dict) -> bytes:
    """Encode a value map as canonical JSON bytes (sorted keys, compact, UTF-8)."""
    if not isinstance(message, dict):
        raise CodecError(f"message must be a map, got {type(message).__name__}")
    _check_value(message, "")
    text = json.dumps(message, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False, allow_nan=False)
    return text.encode("utf-8")


def encode_frame(message: dict, *, max_size: int = DEFAULT_MAX_FRAME) -> bytes:
    """Encode a value map as one self-delimiting frame."""
    payload = canonical_json(message)
    if len(payload) > max_size:
        raise OversizeFrameError(f"payload of {len(payload)} bytes exceeds limit {max_size}")
    return _HEADER.pack(len(payload)) + payload


def _read_exact(read: Callable[[int], bytes], n: int, *, at_boundary: bool) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = read(n - got)
        if not chunk:
            if at_boundary and got == 0:
                raise ConnectionClosed("stream closed between frames")
            raise IncompleteFrameError(f"stream ended after {got} of {n} expected bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def _decode_from(read: Callable[[int], bytes], max_size: int) -> dict:
    header = _read_exact(read, HEADER_SIZE, at_boundary=True)
    (length,) = _HEADER.unpack(header)
    if length > max_size:
        # Payload is left unread; the connection cannot be resynchronized.
        raise OversizeFrameError(f"declared payload of {length} bytes exceeds limit {max_size}")
    payload = _read_exact(read, length, at_boundary=False)
    try:
        message = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        # The frame itself was fully consumed, so callers may keep the stream.
        raise CodecError(f"malformed frame payload: {exc}") from exc
    if not isinstance(message, dict):
        raise CodecError(f"frame payload is not a map, got {type(message).__name__}")
    return message


def decode_frame(stream, *, max_size: int = DEFAULT_MAX_FRAME) -> dict:
    """Decode one frame from a file-like byte stream, consuming exactly the frame.

    Raises ConnectionClosed if the stream is exhausted on a frame boundary,
    IncompleteFrameError on truncation, OversizeFrameError when the declared
    length exceeds ``max_size``, and CodecError for malformed payloads (which
    are still fully consumed).
    """
    return _decode_from(stream.read, max_size)


def send_frame(sock, message: dict, *, max_size: int = DEFAULT_MAX_FRAME) -> None:
    sock.sendall(encode_frame(message, max_size=max_size))


def recv_frame(sock, *, max_size: int = DEFAULT_MAX_FRAME) -> dict:
    """Decode one frame from a connected socket."""
    return _decode_from(lambda n: sock.recv(min(n, 1 << 16)), max_size)
