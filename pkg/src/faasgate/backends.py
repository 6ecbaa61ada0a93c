"""Execution backends: how a node turns an image into a live FEU process.

* ``process``: the reference runtime (``faasgate.feu``) with its compiled-in
  function registry.  The image directory is still deployed and cached; the
  subprocess just does not need to read source from it.
* ``image``: runs the assembled image's own ``feu_main.py``, which loads
  ``func.py`` dynamically.  Exercises the deployed artifact itself.
* ``guest``: runs the separately installed ``guest_runtime`` package against
  the image directory.
* ``container``: not available in this build; selecting it reports why.

CPU portions are enforced on a best-effort basis by lowering scheduler
priority; a portion of 1.0 runs at normal priority.
"""

from __future__ import annotations

import logging
import os
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

log = logging.getLogger(__name__)

BACKEND_NAMES = ("process", "image", "guest", "container")


class BackendError(Exception):
    """A backend is unavailable or failed to spawn a unit."""


@dataclass
class FeuProcess:
    """Handle to one spawned FEU child."""

    label: str
    process: subprocess.Popen
    host: str
    port: int
    cpu_portion: float
    log_path: Path | None = None

    @property
    def pid(self) -> int:
        return self.process.pid

    def alive(self) -> bool:
        return self.process.poll() is None

    def wait(self, timeout: float) -> int | None:
        try:
            return self.process.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            return None

    def terminate(self, grace: float = 2.0) -> None:
        if not self.alive():
            return
        self.process.terminate()
        if self.wait(grace) is None:
            self.process.kill()
            self.process.wait()

    def log_tail(self, limit: int = 2000) -> str:
        if self.log_path is None or not self.log_path.is_file():
            return ""
        data = self.log_path.read_bytes()
        return data[-limit:].decode("utf-8", errors="replace")


def _apply_cpu_portion(pid: int, cpu_portion: float) -> None:
    # Map (0,1] onto niceness 19..0; purely advisory scheduling pressure.
    niceness = round((1.0 - cpu_portion) * 19)
    if niceness <= 0:
        return
    try:
        os.setpriority(os.PRIO_PROCESS, pid, niceness)
    except (OSError, AttributeError):
        log.debug("cannot set niceness %d on pid %d", niceness, pid)


class SubprocessBackend:
    """Shared spawn machinery for the interpreter-based backends."""

    name = "subprocess"

    def command(self, *, label: str, image_dir: Path, boot_path: Path) -> list[str]:
        raise NotImplementedError

    def spawn(self, *, label: str, image_dir: Path, boot_path: Path,
              host: str, port: int, cpu_portion: float,
              log_path: Path | None = None) -> FeuProcess:
        cmd = self.command(label=label, image_dir=image_dir, boot_path=boot_path)
        stderr_target = open(log_path, "ab") if log_path is not None else subprocess.DEVNULL
        try:
            process = subprocess.Popen(
                cmd, stdin=subprocess.DEVNULL, stdout=stderr_target,
                stderr=stderr_target, cwd=str(image_dir))
        except OSError as exc:
            raise BackendError(f"cannot spawn {self.name} FEU for {label!r}: {exc}") from exc
        finally:
            if log_path is not None:
                stderr_target.close()
        _apply_cpu_portion(process.pid, cpu_portion)
        return FeuProcess(label=label, process=process, host=host, port=port,
                          cpu_portion=cpu_portion, log_path=log_path)


class ProcessBackend(SubprocessBackend):
    name = "process"

    def command(self, *, label: str, image_dir: Path, boot_path: Path) -> list[str]:
        return [sys.executable, "-m", "faasgate.feu", str(boot_path), "--label", label]


class ImageBackend(SubprocessBackend):
    name = "image"

    def command(self, *, label: str, image_dir: Path, boot_path: Path) -> list[str]:
        return [sys.executable, str(Path(image_dir) / "feu_main.py"), str(boot_path)]


class GuestBackend(SubprocessBackend):
    name = "guest"

    def command(self, *, label: str, image_dir: Path, boot_path: Path) -> list[str]:
        return [sys.executable, "-m", "guest_runtime", str(boot_path), str(image_dir)]


def create_backend(name: str):
    if name == "process":
        return ProcessBackend()
    if name == "image":
        return ImageBackend()
    if name == "guest":
        return GuestBackend()
    if name == "container":
        raise BackendError(
            "the container backend needs a container engine and is not available "
            "in this build; use the Containerfile inside a deployed image to run "
            "units under your own engine, or pick one of: process, image, guest")
    raise BackendError(f"unknown backend {name!r}; expected one of {BACKEND_NAMES}")
