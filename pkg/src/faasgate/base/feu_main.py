"""Image entry point: read the Boot file, load func.py, serve until FIN.

Usage: python feu_main.py [BOOT_FILE]

Without an argument the Boot file next to this script is used, which is how a
container built from the image recipe starts.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import core  # noqa: E402  (needs the image directory on sys.path first)


def read_boot(path):
    line = Path(path).read_text(encoding="utf-8").strip()
    host, sep, port_text = line.rpartition(":")
    if not sep or not host:
        raise ValueError(f"boot file {path} must contain HOST:PORT, got {line!r}")
    port = int(port_text)
    if not (0 < port < 65536):
        raise ValueError(f"boot file {path} names port {port} outside 1-65535")
    return host, port


def main(argv):
    here = Path(__file__).parent
    boot = Path(argv[1]) if len(argv) > 1 else here / "Boot"
    try:
        host, port = read_boot(boot)
        fn = core.load_function(here)
    except Exception as exc:
        print(exc, file=sys.stderr)
        return 2
    try:
        core.serve(fn, host, port)
    except OSError as exc:
        print(f"cannot serve on {host}:{port}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
