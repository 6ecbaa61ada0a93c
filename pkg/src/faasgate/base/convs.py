"""Length-prefixed canonical JSON codec for the in-image runtime.

Standalone on purpose: an assembled image must run with nothing installed
beyond the interpreter and its own directory.  The format matches the platform
codec byte for byte: 4-byte big-endian payload length, then UTF-8 JSON with
sorted keys and no insignificant whitespace.
"""

import json
import struct

MAX_FRAME = 16 * 1024 * 1024
_HEADER = struct.Struct(">I")


class BadFrame(Exception):
    """Payload bytes do not decode to a JSON object; stream is still usable."""


class StreamClosed(Exception):
    """Peer closed the stream cleanly on a frame boundary."""


def encode(message):
    payload = json.dumps(message, sort_keys=True, separators=(",", ":"),
                         ensure_ascii=False, allow_nan=False).encode("utf-8")
    return _HEADER.pack(len(payload)) + payload


def _read_exact(sock, n, at_boundary):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 65536))
        if not chunk:
            if at_boundary and not buf:
                raise StreamClosed()
            raise ConnectionError("stream ended mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def recv(sock):
    header = _read_exact(sock, 4, True)
    (length,) = _HEADER.unpack(header)
    if length > MAX_FRAME:
        raise ConnectionError(f"frame of {length} bytes exceeds the maximum")
    payload = _read_exact(sock, length, False)
    try:
        message = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadFrame(f"payload is not valid JSON: {exc}")
    if not isinstance(message, dict):
        raise BadFrame("top-level value must be a map")
    return message


def send(sock, message):
    sock.sendall(encode(message))
