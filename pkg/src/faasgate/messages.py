"""Domain types carried on the wire: FERs, RETs, scaling tables, ports tables.

A function execution request (FER) is ``{"id": ID, "x": INPUTS, "m": METADATA}``.
Before execution the id is stripped off and only ``{"x": ..., "m": ...}`` reaches
the function; the result travels back as ``{"id": ID, "ret": {"stat": S, "val": V}}``.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

LABEL_RE = re.compile(r"[a-z][a-z0-9_]{0,63}")

STAT_OK = "OK"
STAT_ERROR = "ERROR"
STATUSES = (STAT_OK, STAT_ERROR)

SOURCE_FILENAME = "func.py"
REQUIREMENTS_FILENAME = "requirements.txt"


class ValidationError(ValueError):
    """A message or table violates its structural contract."""


def validate_label(label) -> str:
    if not isinstance(label, str) or not LABEL_RE.fullmatch(label):
        raise ValidationError(f"invalid function label {label!r}")
    return label


# ---------------------------------------------------------------------------
# FER / RET


def validate_fer(fer) -> None:
    if not isinstance(fer, dict):
        raise ValidationError(f"FER must be a map, got {type(fer).__name__}")
    missing = [k for k in ("id", "x", "m") if k not in fer]
    if missing:
        raise ValidationError(f"FER missing required keys: {', '.join(missing)}")
    if not isinstance(fer["id"], str) or not fer["id"]:
        raise ValidationError("FER id must be a non-empty string")
    for key in ("x", "m"):
        if not isinstance(fer[key], dict):
            raise ValidationError(f"FER {key} must be a map")


def strip_id(fer: Mapping) -> tuple[str, dict]:
    """Split a FER into its id and the inner request passed to the function."""
    validate_fer(fer)
    return fer["id"], {"x": fer["x"], "m": fer["m"]}


def attach_id(ret_id: str, stat: str, val: Mapping) -> dict:
    """Build the RET for a finished FER; the id ties it back to its request."""
    if not isinstance(ret_id, str) or not ret_id:
        raise ValidationError("RET id must be a non-empty string")
    if stat not in STATUSES:
        raise ValidationError(f"RET stat must be one of {STATUSES}, got {stat!r}")
    if not isinstance(val, dict):
        raise ValidationError(f"RET val must be a map, got {type(val).__name__}")
    if stat == STAT_ERROR and "error" not in val:
        raise ValidationError("ERROR RET requires an 'error' message in val")
    return {"id": ret_id, "ret": {"stat": stat, "val": dict(val)}}


def validate_ret(ret) -> None:
    if not isinstance(ret, dict):
        raise ValidationError(f"RET must be a map, got {type(ret).__name__}")
    if not isinstance(ret.get("id"), str) or not ret["id"]:
        raise ValidationError("RET id must be a non-empty string")
    body = ret.get("ret")
    if not isinstance(body, dict):
        raise ValidationError("RET body must be a map under key 'ret'")
    if body.get("stat") not in STATUSES:
        raise ValidationError(f"RET stat must be one of {STATUSES}")
    if not isinstance(body.get("val"), dict):
        raise ValidationError("RET val must be a map")
    if body["stat"] == STAT_ERROR and "error" not in body["val"]:
        raise ValidationError("ERROR RET requires an 'error' message in val")


# ---------------------------------------------------------------------------
# Scaling tables


@dataclass(frozen=True)
class ScaleEntry:
    """One allocation line: spawn ``count`` units of ``label`` at ``cpu`` each."""

    label: str
    count: int
    cpu: float

    def __post_init__(self):
        validate_label(self.label)
        if isinstance(self.count, bool) or not isinstance(self.count, int) or self.count < 1:
            raise ValidationError(f"instance count must be a positive integer, got {self.count!r}")
        if not isinstance(self.cpu, (int, float)) or isinstance(self.cpu, bool):
            raise ValidationError(f"cpu portion must be a number, got {self.cpu!r}")
        if not (0.0 < float(self.cpu) <= 1.0):
            raise ValidationError(f"cpu portion must be in (0, 1], got {self.cpu!r}")


@dataclass(frozen=True)
class ScalingTable:
    """Ordered allocation list for one node; the empty table orders scale-out.

    Entries form a list rather than a map so the same label may appear more
    than once with different cpu portions.
    """

    entries: tuple[ScaleEntry, ...] = ()

    @property
    def is_null(self) -> bool:
        return not self.entries

    def labels(self) -> list[str]:
        """Unique labels in first-appearance order."""
        seen: dict[str, None] = {}
        for entry in self.entries:
            seen.setdefault(entry.label, None)
        return list(seen)

    def total_units(self) -> int:
        return sum(entry.count for entry in self.entries)

    @classmethod
    def of(cls, *entries: tuple[str, int, float]) -> "ScalingTable":
        return cls(tuple(ScaleEntry(label, count, cpu) for label, count, cpu in entries))

    @classmethod
    def from_wire(cls, wire) -> "ScalingTable":
        if not isinstance(wire, (list, tuple)):
            raise ValidationError(f"scaling table must be a list, got {type(wire).__name__}")
        entries = []
        for item in wire:
            if not isinstance(item, (list, tuple)) or len(item) != 3:
                raise ValidationError(f"scaling entry must be [label, count, cpu], got {item!r}")
            entries.append(ScaleEntry(item[0], item[1], item[2]))
        return cls(tuple(entries))

    def to_wire(self) -> list:
        return [[e.label, e.count, e.cpu] for e in self.entries]


NULL_TABLE = ScalingTable()


@dataclass(frozen=True)
class AutoScaleDirective:
    """Cluster-level scaling order: the node tables each cluster must realize."""

    clusters: dict[str, tuple[ScalingTable, ...]]

    def __post_init__(self):
        for cluster, tables in self.clusters.items():
            if not isinstance(cluster, str) or not cluster:
                raise ValidationError(f"cluster label must be a non-empty string, got {cluster!r}")
            if not isinstance(tables, tuple) or not all(isinstance(t, ScalingTable) for t in tables):
                raise ValidationError(f"tables for cluster {cluster!r} must be scaling tables")

    def validate_against(self, declared: Mapping[str, int]) -> None:
        """Check the directive against the configured clusters and node counts."""
        for cluster, tables in self.clusters.items():
            if cluster not in declared:
                raise ValidationError(f"unknown cluster {cluster!r}")
            if len(tables) > declared[cluster]:
                raise ValidationError(
                    f"cluster {cluster!r} declares {declared[cluster]} nodes "
                    f"but the directive carries {len(tables)} tables")

    @classmethod
    def from_wire(cls, wire) -> "AutoScaleDirective":
        if not isinstance(wire, dict):
            raise ValidationError(f"directive must be a map, got {type(wire).__name__}")
        clusters = {}
        for cluster, tables in wire.items():
            if not isinstance(tables, (list, tuple)):
                raise ValidationError(f"tables for cluster {cluster!r} must be a list")
            clusters[cluster] = tuple(ScalingTable.from_wire(t) for t in tables)
        return cls(clusters)

    def to_wire(self) -> dict:
        return {cluster: [t.to_wire() for t in tables] for cluster, tables in self.clusters.items()}


# ---------------------------------------------------------------------------
# Ports table


@dataclass(frozen=True)
class GatePorts:
    push: int
    pull: int


@dataclass(frozen=True)
class PortsTable:
    """Static port assignments: per-function gates, per-cluster scaling, events."""

    gates: dict[str, GatePorts]
    scaling: dict[str, int]
    events_port: int

    def all_ports(self) -> list[int]:
        ports = []
        for gate in self.gates.values():
            ports.extend((gate.push, gate.pull))
        ports.extend(self.scaling.values())
        ports.append(self.events_port)
        return ports

    def validate(self, *, port_range: tuple[int, int] = (1024, 65535),
                 extra_ports: tuple[int, ...] = ()) -> None:
        lo, hi = port_range
        seen: set[int] = set()
        for port in [*self.all_ports(), *extra_ports]:
            if not isinstance(port, int) or isinstance(port, bool):
                raise ValidationError(f"port must be an integer, got {port!r}")
            if not (lo <= port <= hi):
                raise ValidationError(f"port {port} outside configured range {lo}-{hi}")
            if port in seen:
                raise ValidationError(f"port {port} assigned more than once")
            seen.add(port)

    @classmethod
    def from_wire(cls, wire) -> "PortsTable":
        if not isinstance(wire, dict):
            raise ValidationError("ports table must be a map")
        try:
            gates = {validate_label(label): GatePorts(int(entry["push"]), int(entry["pull"]))
                     for label, entry in wire["gates"].items()}
            scaling = {str(cluster): int(port) for cluster, port in wire["scaling"].items()}
            events = int(wire["events"])
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValidationError(f"malformed ports table: {exc!r}") from exc
        return cls(gates=gates, scaling=scaling, events_port=events)

    def to_wire(self) -> dict:
        return {
            "gates": {label: {"push": g.push, "pull": g.pull} for label, g in self.gates.items()},
            "scaling": dict(self.scaling),
            "events": self.events_port,
        }


# ---------------------------------------------------------------------------
# Function packages


@dataclass(frozen=True)
class FunctionPackage:
    """A function's source artifact: main source plus requirements manifest."""

    label: str
    source: bytes
    requirements: bytes = b""

    def __post_init__(self):
        validate_label(self.label)
        if not isinstance(self.source, bytes) or not self.source:
            raise ValidationError(f"package {self.label!r} has an empty source file")
        if not isinstance(self.requirements, bytes):
            raise ValidationError("requirements must be bytes")

    @property
    def digest(self) -> str:
        """Content hash over source and requirements, used as the image cache key."""
        h = hashlib.sha256()
        h.update(b"src:%d\n" % len(self.source))
        h.update(self.source)
        h.update(b"req:%d\n" % len(self.requirements))
        h.update(self.requirements)
        return h.hexdigest()

    @classmethod
    def load(cls, package_dir: Path | str) -> "FunctionPackage":
        package_dir = Path(package_dir)
        label = validate_label(package_dir.name)
        source_path = package_dir / SOURCE_FILENAME
        requirements_path = package_dir / REQUIREMENTS_FILENAME
        if not source_path.is_file():
            raise ValidationError(f"package {label!r} is missing {SOURCE_FILENAME}")
        if not requirements_path.is_file():
            raise ValidationError(f"package {label!r} is missing {REQUIREMENTS_FILENAME}")
        return cls(label=label, source=source_path.read_bytes(),
                   requirements=requirements_path.read_bytes())
