"""Reference function execution unit: one process, one function, EXE/FIN server.

The process reads a one-line Boot file naming HOST:PORT, binds its inner server
there, and answers framed requests:

* ``{"c":"EXE","fer":{"x":...,"m":...}}`` runs the function and replies
  ``{"stat":"OK","val":<returned map>}`` or ``{"stat":"ERROR","val":{"error":...}}``.
* ``{"c":"FIN"}`` replies ``{"stat":"OK"}`` and exits cleanly.

Functions are compiled in through a registry keyed by label; loading functions
from source at run time is the guest runtime's job.  The request loop is
single-threaded: a unit executes at most one request at a time, and isolation
comes from the process boundary.
"""

from __future__ import annotations

import argparse
import socket
import sys
import time
from pathlib import Path
from typing import Callable

from .framing import CodecError, ConnectionClosed, FrameError, recv_frame, send_frame

InnerFer = dict
FunctionBody = Callable[[InnerFer], dict]

REGISTRY: dict[str, FunctionBody] = {}


class BootError(ValueError):
    """The Boot file is missing or does not parse as HOST:PORT."""


def register(label: str):
    """Class-level decorator adding a function body under the given label."""
    def deco(fn: FunctionBody) -> FunctionBody:
        REGISTRY[label] = fn
        return fn
    return deco


@register("hellocot")
def _hellocot(fer: InnerFer) -> dict:
    return {"ret": "Hello Cloud of Things!"}


@register("echo")
def _echo(fer: InnerFer) -> dict:
    return fer["x"]


@register("odd_fail")
def _odd_fail(fer: InnerFer) -> dict:
    i = fer["x"]["i"]
    if i % 2 == 1:
        raise ValueError(f"odd input {i} rejected")
    return {"ret": i}


@register("sleeper")
def _sleeper(fer: InnerFer) -> dict:
    seconds = float(fer["x"].get("seconds", 0.0))
    time.sleep(seconds)
    return {"ret": seconds}


@register("fft")
def _fft(fer: InnerFer) -> dict:
    import numpy as np

    block = np.asarray(fer["x"]["block"], dtype=float)
    spectrum = np.fft.fft(block)
    return {"re": [float(v) for v in spectrum.real],
            "im": [float(v) for v in spectrum.imag]}


def read_boot(path: Path | str) -> tuple[str, int]:
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


def _valid_inner(fer) -> bool:
    return (isinstance(fer, dict)
            and isinstance(fer.get("x"), dict)
            and isinstance(fer.get("m"), dict))


def handle_request(fn: FunctionBody, request: dict) -> tuple[dict, bool]:
    """Map one request to (reply, should_exit).  Never raises."""
    command = request.get("c")
    if command == "FIN":
        return {"stat": "OK"}, True
    if command != "EXE":
        return {"stat": "ERROR", "val": {"error": "bad_primitive"}}, False
    fer = request.get("fer")
    if not _valid_inner(fer):
        return {"stat": "ERROR", "val": {"error": "bad_fer"}}, False
    try:
        result = fn(fer)
    except Exception as exc:
        return {"stat": "ERROR", "val": {"error": f"{type(exc).__name__}: {exc}"}}, False
    if not isinstance(result, dict):
        return {"stat": "ERROR", "val": {"error": "function returned non-map value"}}, False
    return {"stat": "OK", "val": result}, False


def serve_connection(fn: FunctionBody, conn: socket.socket) -> bool:
    """Serve one client until it disconnects; True means FIN was received."""
    while True:
        try:
            request = recv_frame(conn)
        except ConnectionClosed:
            return False
        except CodecError:
            send_frame(conn, {"stat": "ERROR", "val": {"error": "bad_frame"}})
            continue
        except FrameError:
            # Truncated or oversize: the stream cannot be re-synchronized.
            return False
        reply, should_exit = handle_request(fn, request)
        send_frame(conn, reply)
        if should_exit:
            return True


def serve(fn: FunctionBody, host: str, port: int) -> None:
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
                finished = serve_connection(fn, conn)
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
        prog="faasgate-feu",
        description="Serve one registered function over the EXE/FIN protocol.")
    parser.add_argument("boot", help="path to the Boot file (one line, HOST:PORT)")
    parser.add_argument("--label", required=True, help="registered function label")
    args = parser.parse_args(argv)

    fn = REGISTRY.get(args.label)
    if fn is None:
        print(f"unknown function label {args.label!r}; "
              f"registered: {', '.join(sorted(REGISTRY))}", file=sys.stderr)
        return 2
    try:
        host, port = read_boot(args.boot)
    except BootError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    try:
        serve(fn, host, port)
    except OSError as exc:
        print(f"cannot serve on {host}:{port}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
