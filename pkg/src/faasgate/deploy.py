"""Function image deployment: clerk fetch, image assembly, content-hash cache.

An image is a self-contained directory holding the base runtime files plus the
function package.  Images live under ``cache/<label>/<digest>/`` where digest
is the content hash of (source, requirements), so a changed source lands in a
new directory and an unchanged one is found without refetching.  The digest is
compared against the controller's copy through the cheap clerk "digest"
command; the full "source" transfer happens only on a miss.
"""

from __future__ import annotations

import logging
import os
import tempfile
import threading
from pathlib import Path

from .messages import (
    REQUIREMENTS_FILENAME,
    SOURCE_FILENAME,
    FunctionPackage,
    GatePorts,
    ValidationError,
)
from .transport import one_shot_request

log = logging.getLogger(__name__)

BASE_DIR = Path(__file__).parent / "base"
BASE_FILES = ("feu_main.py", "core.py", "convs.py", "Boot", "Containerfile")


class ClerkError(Exception):
    """A clerk request failed or returned an error reply."""


class DeploymentError(Exception):
    """An image could not be fetched or assembled."""


class ClerkClient:
    """Typed clerk requests; every call opens a fresh short-lived connection."""

    def __init__(self, host: str, port: int, *, timeout: float = 10.0):
        self.host = host
        self.port = port
        self.timeout = timeout

    def _request(self, message: dict) -> dict:
        try:
            reply = one_shot_request(self.host, self.port, message, timeout=self.timeout)
        except OSError as exc:
            raise ClerkError(f"clerk {self.host}:{self.port} unreachable: {exc}") from exc
        if reply.get("r") != "OK":
            raise ClerkError(f"clerk rejected {message.get('c')!r}: {reply.get('error')}")
        return reply

    def chk(self) -> None:
        self._request({"c": "chk"})

    def gate_ports(self) -> dict[str, GatePorts]:
        reply = self._request({"c": "gate_ports"})
        gates = reply.get("gates")
        if not isinstance(gates, dict):
            raise ClerkError(f"malformed gate_ports reply: {reply!r}")
        try:
            return {label: GatePorts(int(entry["push"]), int(entry["pull"]))
                    for label, entry in gates.items()}
        except (KeyError, TypeError) as exc:
            raise ClerkError(f"malformed gate_ports reply: {exc!r}") from exc

    def scaling_ports(self) -> tuple[dict[str, int], int]:
        reply = self._request({"c": "scaling_ports"})
        scaling = reply.get("scaling")
        events = reply.get("events")
        if not isinstance(scaling, dict) or not isinstance(events, int):
            raise ClerkError(f"malformed scaling_ports reply: {reply!r}")
        return {str(k): int(v) for k, v in scaling.items()}, events

    def digest(self, label: str) -> str:
        reply = self._request({"c": "digest", "label": label})
        digest = reply.get("digest")
        if not isinstance(digest, str) or not digest:
            raise ClerkError(f"malformed digest reply: {reply!r}")
        return digest

    def source(self, label: str) -> FunctionPackage:
        reply = self._request({"c": "source", "label": label})
        try:
            return FunctionPackage(label=reply["label"],
                                   source=reply["source"].encode("utf-8"),
                                   requirements=reply["requirements"].encode("utf-8"))
        except (KeyError, AttributeError, ValidationError) as exc:
            raise ClerkError(f"malformed source reply for {label!r}: {exc}") from exc


def default_functions_root() -> Path:
    """The function packages shipped with this distribution."""
    return Path(__file__).parent / "functions_db"


def assemble_image(package: FunctionPackage, target: Path) -> None:
    """Materialize an image directory: base runtime files plus the package.

    Assembly is atomic: everything is staged in a scratch directory next to the
    target and renamed into place, so readers never observe a half-built image.
    """
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".build-", dir=target.parent))
    try:
        for name in BASE_FILES:
            data = (BASE_DIR / name).read_bytes()
            (scratch / name).write_bytes(data)
        (scratch / SOURCE_FILENAME).write_bytes(package.source)
        (scratch / REQUIREMENTS_FILENAME).write_bytes(package.requirements)
        try:
            os.replace(scratch, target)
        except OSError:
            if target.is_dir():
                # Concurrent build won the rename; theirs is byte-identical.
                _rmtree(scratch)
            else:
                raise
    except Exception as exc:
        _rmtree(scratch)
        raise DeploymentError(f"cannot assemble image for {package.label!r}: {exc}") from exc


def _rmtree(path: Path) -> None:
    import shutil

    shutil.rmtree(path, ignore_errors=True)


class Deployer:
    """Ensures a current image exists locally for each requested label."""

    def __init__(self, cache_dir: Path | str, clerk: ClerkClient):
        self.cache_dir = Path(cache_dir)
        self.clerk = clerk
        self._lock = threading.Lock()
        self.fetch_count = 0
        self.build_count = 0

    def image_path(self, label: str, digest: str) -> Path:
        return self.cache_dir / label / digest

    def cached_digests(self, label: str) -> list[str]:
        label_dir = self.cache_dir / label
        if not label_dir.is_dir():
            return []
        return sorted(p.name for p in label_dir.iterdir()
                      if p.is_dir() and (p / SOURCE_FILENAME).is_file())

    def ensure(self, label: str) -> Path:
        """Return the image directory for label's current source, building it
        if the cache lacks that exact content hash."""
        try:
            digest = self.clerk.digest(label)
        except ClerkError as exc:
            raise DeploymentError(f"cannot resolve digest for {label!r}: {exc}") from exc
        target = self.image_path(label, digest)
        with self._lock:
            if (target / SOURCE_FILENAME).is_file():
                log.debug("deploy %s: cache hit (%s)", label, digest[:12])
                return target
            try:
                package = self.clerk.source(label)
            except ClerkError as exc:
                raise DeploymentError(f"cannot fetch source for {label!r}: {exc}") from exc
            self.fetch_count += 1
            if package.digest != digest:
                # Source changed between the two clerk calls; trust the bytes
                # we actually received.
                target = self.image_path(label, package.digest)
            assemble_image(package, target)
            self.build_count += 1
            log.info("deploy %s: built image %s", label, target)
            return target
