"""EXE/FIN server core for an assembled image: loads func.py, serves requests.

Request and reply shapes, error strings included, are identical to the
reference unit runtime so the two are interchangeable on the wire.
"""

import importlib.util
import socket
from pathlib import Path

import convs


def load_function(package_dir):
    """Import func.py from the image directory and return its f callable."""
    source = Path(package_dir) / "func.py"
    if not source.is_file():
        raise FileNotFoundError(f"{source} does not exist")
    spec = importlib.util.spec_from_file_location("func", source)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    fn = getattr(module, "f", None)
    if not callable(fn):
        raise AttributeError(f"{source} does not define a callable f(FER)")
    return fn


def _valid_inner(fer):
    return (isinstance(fer, dict)
            and isinstance(fer.get("x"), dict)
            and isinstance(fer.get("m"), dict))


def handle_request(fn, request):
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


def serve_connection(fn, conn):
    """Serve one client until it disconnects; True means FIN was received."""
    while True:
        try:
            request = convs.recv(conn)
        except convs.StreamClosed:
            return False
        except convs.BadFrame:
            convs.send(conn, {"stat": "ERROR", "val": {"error": "bad_frame"}})
            continue
        except ConnectionError:
            return False
        reply, should_exit = handle_request(fn, request)
        convs.send(conn, reply)
        if should_exit:
            return True


def serve(fn, host, port):
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
