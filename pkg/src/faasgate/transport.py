"""Threaded TCP servers and clients speaking the length-prefixed frame codec.

Three server personalities cover every socket the platform opens:

* ``ReqRepServer`` answers each request frame with exactly one reply frame.
* ``SinkServer`` absorbs frames without replying (return queues).
* ``PubServer`` fans a frame out to every connected subscriber (events).

All of them run one daemon thread per connection plus one accept thread, so a
stuck peer never blocks the rest of the system.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Callable

from .framing import (
    DEFAULT_MAX_FRAME,
    ConnectionClosed,
    FrameError,
    encode_frame,
    recv_frame,
    send_frame,
)

log = logging.getLogger(__name__)


def free_port(host: str = "127.0.0.1") -> int:
    """Ask the OS for an unused port.  Small race window; fine for tests."""
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.bind((host, 0))
        return sock.getsockname()[1]


def wait_for_port(host: str, port: int, timeout: float = 10.0) -> None:
    """Block until a TCP connect to (host, port) succeeds."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            with socket.create_connection((host, port), timeout=0.5):
                return
        except OSError:
            if time.monotonic() >= deadline:
                raise TimeoutError(f"nothing listening on {host}:{port} after {timeout:.1f}s")
            time.sleep(0.02)


def wait_until(predicate: Callable[[], bool], timeout: float, *,
               interval: float = 0.01, message: str = "condition") -> None:
    deadline = time.monotonic() + timeout
    while not predicate():
        if time.monotonic() >= deadline:
            raise TimeoutError(f"{message} not reached within {timeout:.1f}s")
        time.sleep(interval)


class TcpServer:
    """Accept loop over a listening socket; subclasses serve each connection."""

    def __init__(self, host: str, port: int, *, name: str = "server",
                 max_frame: int = DEFAULT_MAX_FRAME):
        self.host = host
        self.name = name
        self.max_frame = max_frame
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(64)
        self.port = self._listener.getsockname()[1]
        self._closed = threading.Event()
        self._conn_lock = threading.Lock()
        self._conns: set[socket.socket] = set()
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"{name}-accept:{self.port}", daemon=True)

    def start(self) -> "TcpServer":
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                conn, addr = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._conn_lock:
                if self._closed.is_set():
                    conn.close()
                    return
                self._conns.add(conn)
            threading.Thread(target=self._serve_guarded, args=(conn, addr),
                             name=f"{self.name}-conn:{self.port}", daemon=True).start()

    def _serve_guarded(self, conn: socket.socket, addr) -> None:
        try:
            self.serve_connection(conn)
        except (ConnectionClosed, OSError):
            pass
        except Exception:
            log.exception("%s: connection handler failed (%s)", self.name, addr)
        finally:
            with self._conn_lock:
                self._conns.discard(conn)
            try:
                conn.close()
            except OSError:
                pass

    def serve_connection(self, conn: socket.socket) -> None:
        raise NotImplementedError

    def close(self) -> None:
        self._closed.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._conn_lock:
            conns = list(self._conns)
            self._conns.clear()
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                conn.close()
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ReqRepServer(TcpServer):
    """One reply per request.  Handlers get the decoded map and return a map.

    A malformed frame earns an error reply instead of tearing the server down;
    a handler exception is reported to the client the same way.  The stream is
    only abandoned when framing makes the tail unreadable (oversize header).
    """

    def __init__(self, host: str, port: int,
                 handler: Callable[[dict, socket.socket], dict], *,
                 name: str = "reqrep", max_frame: int = DEFAULT_MAX_FRAME):
        super().__init__(host, port, name=name, max_frame=max_frame)
        self.handler = handler

    def serve_connection(self, conn: socket.socket) -> None:
        while True:
            try:
                request = recv_frame(conn, max_size=self.max_frame)
            except ConnectionClosed:
                return
            except FrameError as exc:
                log.warning("%s: bad request frame: %s", self.name, exc)
                try:
                    send_frame(conn, {"r": "ERR", "error": f"bad_frame: {exc}"})
                except OSError:
                    return
                if not exc.stream_recoverable:
                    return
                continue
            try:
                reply = self.handler(request, conn)
            except Exception as exc:
                log.exception("%s: handler raised", self.name)
                reply = {"r": "ERR", "error": f"{type(exc).__name__}: {exc}"}
            send_frame(conn, reply)


class SinkServer(TcpServer):
    """Consume frames and hand each to the callback; never reply.

    Malformed frames are logged and dropped, which keeps a buggy producer from
    poisoning the queue behind this socket.
    """

    def __init__(self, host: str, port: int, callback: Callable[[dict], None], *,
                 name: str = "sink", max_frame: int = DEFAULT_MAX_FRAME):
        super().__init__(host, port, name=name, max_frame=max_frame)
        self.callback = callback

    def serve_connection(self, conn: socket.socket) -> None:
        while True:
            try:
                message = recv_frame(conn, max_size=self.max_frame)
            except ConnectionClosed:
                return
            except FrameError as exc:
                log.warning("%s: dropped bad frame: %s", self.name, exc)
                if not exc.stream_recoverable:
                    return
                continue
            try:
                self.callback(message)
            except Exception:
                log.exception("%s: sink callback failed", self.name)


class PubServer(TcpServer):
    """Broadcast frames to every connected subscriber.

    Each new subscriber receives a ``{"e":"sub"}`` frame once it is
    registered, so a client that has seen the acknowledgment is guaranteed to
    receive every subsequent publish.  Anything subscribers send is ignored; a
    dead subscriber is dropped rather than letting it stall the publisher.
    """

    def __init__(self, host: str, port: int, *, name: str = "pub",
                 max_frame: int = DEFAULT_MAX_FRAME):
        super().__init__(host, port, name=name, max_frame=max_frame)
        self._subs_lock = threading.Lock()
        # Per-subscriber send locks: publish and the subscription ack must not
        # interleave bytes on the same connection.
        self._subs: dict[socket.socket, threading.Lock] = {}

    def serve_connection(self, conn: socket.socket) -> None:
        conn.settimeout(None)
        send_lock = threading.Lock()
        with self._subs_lock:
            self._subs[conn] = send_lock
        try:
            with send_lock:
                send_frame(conn, {"e": "sub"})
            # Drain (and ignore) anything the subscriber writes; EOF ends it.
            while True:
                if not conn.recv(4096):
                    return
        finally:
            with self._subs_lock:
                self._subs.pop(conn, None)

    def subscriber_count(self) -> int:
        with self._subs_lock:
            return len(self._subs)

    def publish(self, message: dict) -> int:
        """Send to all current subscribers; returns how many got the frame."""
        payload = encode_frame(message, max_size=self.max_frame)
        with self._subs_lock:
            subs = list(self._subs.items())
        delivered = 0
        for conn, send_lock in subs:
            try:
                with send_lock:
                    conn.sendall(payload)
                delivered += 1
            except OSError:
                with self._subs_lock:
                    self._subs.pop(conn, None)
                try:
                    conn.close()
                except OSError:
                    pass
        return delivered


class ReqRepClient:
    """Persistent request/reply connection with lazy connect."""

    def __init__(self, host: str, port: int, *, timeout: float | None = 30.0,
                 max_frame: int = DEFAULT_MAX_FRAME):
        self.host = host
        self.port = port
        self.timeout = timeout
        self.max_frame = max_frame
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _connect(self) -> socket.socket:
        sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock

    def request(self, message: dict) -> dict:
        with self._lock:
            if self._sock is None:
                self._sock = self._connect()
            try:
                send_frame(self._sock, message)
                return recv_frame(self._sock, max_size=self.max_frame)
            except (OSError, ConnectionClosed):
                # One reconnect attempt covers a server that restarted between
                # requests; a second failure is the caller's problem.
                self.close_nolock()
                self._sock = self._connect()
                send_frame(self._sock, message)
                return recv_frame(self._sock, max_size=self.max_frame)

    def close_nolock(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def close(self) -> None:
        with self._lock:
            self.close_nolock()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def one_shot_request(host: str, port: int, message: dict, *,
                     timeout: float | None = 30.0,
                     max_frame: int = DEFAULT_MAX_FRAME) -> dict:
    """Open a connection, send one request, read one reply, close."""
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        send_frame(sock, message)
        return recv_frame(sock, max_size=max_frame)
