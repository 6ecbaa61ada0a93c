"""Function execution unit that loads its function from source at startup.

Given a Boot file (one ``HOST:PORT`` line) and a package directory holding a
``func.py`` that defines ``f(FER)``, this process binds a single-threaded
server and answers framed requests:

* ``{"c":"EXE","fer":{"x":...,"m":...}}`` runs ``f`` on the request and
  replies ``{"stat":"OK","val":<returned map>}``, or ``{"stat":"ERROR",
  "val":{"error":...}}`` when the request or the function misbehaves.
* ``{"c":"FIN"}`` replies ``{"stat":"OK"}`` and exits with status 0.

Frames are a 4-byte big-endian length prefix followed by UTF-8 JSON with
sorted keys and no whitespace; the payload must be a JSON object.  Reply
bytes, error strings included, match the platform's compiled-in unit runtime
exactly, so the two are interchangeable behind a node.

This module is deliberately self-contained: it shares no code with the
platform, only the wire contract.
"""

from __future__ import annotations

import argparse
import importlib.util
import json
import socket
import struct
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

MAX_FRAME = 16 * 1024 * 1024
ENTRY_FILENAME = "func.py"
ENTRY_NAME = "f"


class BootError(ValueError):
    """The Boot file is missing or does not parse as HOST:PORT."""


class LoadError(Exception):
    """The package directory does not provide a usable function."""


class ProtocolError(Exception):
    """A frame arrived whole but its payload is not a JSON object.

    The offending bytes were fully consumed, so the connection can keep
    serving after an error reply.
    """


class StreamEnded(Exception):
    """The peer closed the connection between frames."""


class StreamBroken(Exception):
    """The stream died mid-frame or declared an impossible length."""


# ---------------------------------------------------------------------------
# Framing


def pack(message: dict) -> bytes:
    """Length-prefixed canonical JSON: sorted keys, compact, raw UTF-8."""
    text = json.dumps(message, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False, allow_nan=False)
    payload = text.encode("utf-8")
    return struct.pack(">I", len(payload)) + payload


def _read_exact(sock: socket.socket, count: int, *, at_boundary: bool) -> bytes:
    chunks = bytearray()
    while len(chunks) < count:
        piece = sock.recv(count - len(chunks))
        if not piece:
            if at_boundary and not chunks:
                raise StreamEnded("connection closed between frames")
            raise StreamBroken(f"connection lost after {len(chunks)} of {count} bytes")
        chunks.extend(piece)
    return bytes(chunks)


def read_message(sock: socket.socket) -> dict:
    header = _read_exact(sock, 4, at_boundary=True)
    (size,) = struct.unpack(">I", header)
    if size > MAX_FRAME:
        raise StreamBroken(f"declared frame of {size} bytes exceeds {MAX_FRAME}")
    payload = _read_exact(sock, size, at_boundary=False)
    try:
        decoded = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"frame payload is not valid JSON: {exc}") from exc
    if not isinstance(decoded, dict):
        raise ProtocolError("frame payload is not a map")
    return decoded


def send_message(sock: socket.socket, message: dict) -> None:
    sock.sendall(pack(message))


# ---------------------------------------------------------------------------
# Function loading


@dataclass
class LoadedFunction:
    """A package's entry point: the ``f`` callable and where it came from."""

    label: str
    entry: Callable[[dict], dict]


def load(package_dir: Path | str) -> LoadedFunction:
    """Import ``func.py`` from the package directory and wrap its ``f``.

    Installing anything listed in ``requirements.txt`` happened at deployment
    time; by now the dependencies are importable or the function fails openly.
    """
    package_dir = Path(package_dir)
    source = package_dir / ENTRY_FILENAME
    if not source.is_file():
        raise LoadError(f"{source} does not exist")
    spec = importlib.util.spec_from_file_location("guest_func", source)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    entry = getattr(module, ENTRY_NAME, None)
    if not callable(entry):
        raise LoadError(f"{source} does not define a callable {ENTRY_NAME}(FER)")
    return LoadedFunction(label=package_dir.resolve().name, entry=entry)


# ---------------------------------------------------------------------------
# Boot and serving


def parse_boot(path: Path | str) -> tuple[str, int]:
    """Parse the Boot file: a single HOST:PORT line."""
    path = Path(path)
    try:
        line = path.read_text(encoding="utf-8").strip()
    except OSError as exc:
        raise BootError(f"cannot read boot file {path}: {exc}") from exc
    host, sep, port_text = line.rpartition(":")
    if not sep or not host:
        raise BootError(f"boot file {path} must contain HOST:PORT, got {line!r}")
    try:
        port = int(port_text)
    except ValueError:
        raise BootError(f"boot file {path} has a non-numeric port {port_text!r}") from None
    if not (0 < port < 65536):
        raise BootError(f"boot file {path} names port {port} outside 1-65535")
    return host, port


def execute(entry: Callable[[dict], dict], request: dict) -> tuple[dict, bool]:
    """Map one request to (reply, should_exit).  Never raises."""
    command = request.get("c")
    if command == "FIN":
        return {"stat": "OK"}, True
    if command != "EXE":
        return {"stat": "ERROR", "val": {"error": "bad_primitive"}}, False
    fer = request.get("fer")
    if not (isinstance(fer, dict) and isinstance(fer.get("x"), dict)
            and isinstance(fer.get("m"), dict)):
        return {"stat": "ERROR", "val": {"error": "bad_fer"}}, False
    try:
        result = entry(fer)
    except Exception as exc:
        return {"stat": "ERROR", "val": {"error": f"{type(exc).__name__}: {exc}"}}, False
    if not isinstance(result, dict):
        return {"stat": "ERROR", "val": {"error": "function returned non-map value"}}, False
    return {"stat": "OK", "val": result}, False


def attend(entry: Callable[[dict], dict], conn: socket.socket) -> bool:
    """Serve one client until it disconnects; True means FIN was received."""
    while True:
        try:
            request = read_message(conn)
        except StreamEnded:
            return False
        except ProtocolError:
            send_message(conn, {"stat": "ERROR", "val": {"error": "bad_frame"}})
            continue
        except (StreamBroken, OSError):
            return False
        reply, should_exit = execute(entry, request)
        send_message(conn, reply)
        if should_exit:
            return True


def serve(entry: Callable[[dict], dict], host: str, port: int) -> None:
    """Accept one connection at a time until a FIN arrives."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(8)
    try:
        while True:
            conn, _addr = listener.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            try:
                finished = attend(entry, conn)
            except OSError:
                finished = False
            finally:
                try:
                    conn.close()
                except OSError:
                    pass
            if finished:
                return
    finally:
        listener.close()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="guest-runtime",
        description="Serve a package's f(FER) over the framed EXE/FIN protocol.")
    parser.add_argument("boot", help="path to the Boot file (one line, HOST:PORT)")
    parser.add_argument("package_dir", help="directory containing func.py")
    args = parser.parse_args(argv)

    try:
        host, port = parse_boot(args.boot)
    except BootError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    try:
        loaded = load(args.package_dir)
    except LoadError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"cannot load {args.package_dir}: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 2
    try:
        serve(loaded.entry, host, port)
    except OSError as exc:
        print(f"cannot serve on {host}:{port}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
