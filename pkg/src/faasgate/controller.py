"""Control-plane process: broker methods, clerk directory, scaling, and gates.

One controller hosts four socket families:

* Clerk (request-reply): liveness checks, port directories, function sources.
* Events (publish-subscribe): one frame per scaling round to every node.
* Scaling, one server per cluster (request-reply): grants scaling tables to
  requesting nodes first-come-first-served within a round.
* Gates, one pair per function: the push server hands queued FERs to agents,
  the pull server collects their RETs without replying.

Brokers drive the controller through the methods surface (``push_fer``,
``pop_ret``, ``check_available``, ``autoscale``), either in process or through
the optional framed-TCP methods server.
"""

from __future__ import annotations

import collections
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .framing import canonical_json
from .messages import (
    AutoScaleDirective,
    FunctionPackage,
    GatePorts,
    PortsTable,
    ScalingTable,
    ValidationError,
    validate_fer,
    validate_ret,
)
from .transport import PubServer, ReqRepServer, SinkServer

log = logging.getLogger(__name__)

DEFAULT_PORT_RANGE = (1024, 65535)


class ControllerError(Exception):
    """Startup or request handling failed on the controller."""


class UnknownLabelError(ControllerError):
    """A function label or cluster label has no matching server state."""


@dataclass
class InitConfig:
    """Static deployment settings: ports, clusters, and the functions root."""

    ports_table: PortsTable
    clusters: dict[str, int]
    functions_root: Path
    clerk_port: int
    host: str = "127.0.0.1"
    methods_port: int | None = None
    port_range: tuple[int, int] = DEFAULT_PORT_RANGE

    def validate(self) -> None:
        extra = [self.clerk_port]
        if self.methods_port is not None:
            extra.append(self.methods_port)
        self.ports_table.validate(port_range=self.port_range, extra_ports=tuple(extra))
        for cluster, count in self.clusters.items():
            if not isinstance(count, int) or isinstance(count, bool) or count < 1:
                raise ValidationError(
                    f"cluster {cluster!r} must declare a positive node count, got {count!r}")
        if set(self.clusters) != set(self.ports_table.scaling):
            raise ValidationError(
                f"clusters {sorted(self.clusters)} do not match "
                f"scaling ports {sorted(self.ports_table.scaling)}")

    def to_wire(self) -> dict:
        wire = {
            "host": self.host,
            "clerk_port": self.clerk_port,
            "ports": self.ports_table.to_wire(),
            "clusters": dict(self.clusters),
            "functions_root": str(self.functions_root),
            "port_range": list(self.port_range),
        }
        if self.methods_port is not None:
            wire["methods_port"] = self.methods_port
        return wire

    def save(self, path: Path | str) -> None:
        Path(path).write_bytes(canonical_json(self.to_wire()) + b"\n")

    @classmethod
    def from_wire(cls, wire: dict) -> "InitConfig":
        try:
            config = cls(
                ports_table=PortsTable.from_wire(wire["ports"]),
                clusters={str(k): v for k, v in wire["clusters"].items()},
                functions_root=Path(wire["functions_root"]),
                clerk_port=wire["clerk_port"],
                host=wire.get("host", "127.0.0.1"),
                methods_port=wire.get("methods_port"),
                port_range=tuple(wire.get("port_range", DEFAULT_PORT_RANGE)),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValidationError(f"malformed init config: {exc!r}") from exc
        config.validate()
        return config

    @classmethod
    def load(cls, path: Path | str) -> "InitConfig":
        return cls.from_wire(json.loads(Path(path).read_text(encoding="utf-8")))


class Gate:
    """Per-function FER/RET FIFO pair; all queue access goes through the lock."""

    def __init__(self, label: str, ports: GatePorts):
        self.label = label
        self.ports = ports
        self._lock = threading.Lock()
        self._fers: collections.deque[dict] = collections.deque()
        self._rets: collections.deque[dict] = collections.deque()

    def push_fer(self, fer: dict) -> None:
        with self._lock:
            self._fers.append(fer)

    def pop_fer(self) -> dict | None:
        with self._lock:
            return self._fers.popleft() if self._fers else None

    def ingest_ret(self, ret: dict) -> None:
        with self._lock:
            self._rets.append(ret)

    def pop_ret(self) -> dict | None:
        with self._lock:
            return self._rets.popleft() if self._rets else None

    def ret_available(self) -> bool:
        with self._lock:
            return bool(self._rets)

    def depth(self) -> tuple[int, int]:
        with self._lock:
            return len(self._fers), len(self._rets)


@dataclass
class Cluster:
    """Scaling state for one cluster: pending grants and the FCFS counter."""

    label: str
    declared_nodes: int
    pending: tuple[ScalingTable, ...] = ()
    served: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)

    def reset(self, tables: tuple[ScalingTable, ...]) -> None:
        with self.lock:
            self.pending = tables
            self.served = 0

    def grant(self) -> ScalingTable:
        """Hand out the next pending table, or the null table once exhausted."""
        with self.lock:
            if self.served < len(self.pending):
                table = self.pending[self.served]
                self.served += 1
                return table
            return ScalingTable()


class Controller:
    """Runs every control-plane server and owns the gate/cluster state."""

    def __init__(self, config: InitConfig):
        config.validate()
        self.config = config
        self.functions: dict[str, FunctionPackage] = {}
        self.gates: dict[str, Gate] = {}
        self.clusters: dict[str, Cluster] = {}
        self.round = 0
        self._round_lock = threading.Lock()
        self._counter_lock = threading.Lock()
        self._source_requests: collections.Counter[str] = collections.Counter()
        self._servers: list = []
        self._events: PubServer | None = None
        self._started = False

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "Controller":
        if self._started:
            raise ControllerError("controller already started")
        self._load_functions()
        if set(self.functions) != set(self.config.ports_table.gates):
            raise ControllerError(
                f"function packages {sorted(self.functions)} do not match "
                f"gate ports for {sorted(self.config.ports_table.gates)}")
        for cluster, count in self.config.clusters.items():
            self.clusters[cluster] = Cluster(label=cluster, declared_nodes=count)
        try:
            self._start_servers()
        except Exception:
            self.close()
            raise
        self._started = True
        log.info("controller up: %d gates, %d clusters, clerk on %s:%d",
                 len(self.gates), len(self.clusters), self.config.host,
                 self.config.clerk_port)
        return self

    def _load_functions(self) -> None:
        root = Path(self.config.functions_root)
        if not root.is_dir():
            raise ControllerError(f"functions root {root} is not a directory")
        for entry in sorted(root.iterdir()):
            if not entry.is_dir():
                continue
            try:
                package = FunctionPackage.load(entry)
            except ValidationError as exc:
                raise ControllerError(f"function package {entry.name!r}: {exc}") from exc
            self.functions[package.label] = package
        if not self.functions:
            raise ControllerError(f"functions root {root} contains no function packages")

    def _bind(self, factory, port: int, *args, **kwargs):
        try:
            server = factory(self.config.host, port, *args, **kwargs)
        except OSError as exc:
            raise ControllerError(f"cannot bind port {port}: {exc}") from exc
        self._servers.append(server)
        server.start()
        return server

    def _start_servers(self) -> None:
        ports = self.config.ports_table
        self._bind(ReqRepServer, self.config.clerk_port, self.clerk_serve, name="clerk")
        self._events = self._bind(PubServer, ports.events_port, name="events")
        for cluster, port in ports.scaling.items():
            handler = self._make_scaling_handler(cluster)
            self._bind(ReqRepServer, port, handler, name=f"scaling-{cluster}")
        for label, gate_ports in ports.gates.items():
            gate = Gate(label, gate_ports)
            self.gates[label] = gate
            self._bind(ReqRepServer, gate_ports.push, self._make_push_handler(gate),
                       name=f"push-{label}")
            self._bind(SinkServer, gate_ports.pull, self._make_pull_callback(gate),
                       name=f"pull-{label}")
        if self.config.methods_port is not None:
            self._bind(ReqRepServer, self.config.methods_port, self.methods_serve,
                       name="methods")

    def close(self) -> None:
        for server in reversed(self._servers):
            server.close()
        self._servers.clear()
        self._started = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- methods space (broker API) -----------------------------------------

    def _gate(self, label: str) -> Gate:
        try:
            return self.gates[label]
        except KeyError:
            raise UnknownLabelError(f"no gate for function label {label!r}") from None

    def push_fer(self, label: str, fer: dict) -> None:
        validate_fer(fer)
        self._gate(label).push_fer(fer)

    def pop_ret(self, label: str) -> dict | None:
        return self._gate(label).pop_ret()

    def check_available(self, label: str) -> bool:
        return self._gate(label).ret_available()

    def autoscale(self, directive: AutoScaleDirective | dict) -> int:
        """Install a new scaling round and announce it; returns the round number."""
        if isinstance(directive, dict):
            directive = AutoScaleDirective.from_wire(directive)
        directive.validate_against(self.config.clusters)
        for cluster in directive.clusters:
            for table in directive.clusters[cluster]:
                for entry in table.entries:
                    if entry.label not in self.functions:
                        raise UnknownLabelError(
                            f"directive names unknown function {entry.label!r}")
        with self._round_lock:
            # Clusters the directive does not mention are reset to no pending
            # grants: a round is global and supersedes the previous one everywhere.
            for cluster in self.clusters.values():
                cluster.reset(tuple(directive.clusters.get(cluster.label, ())))
            self.round += 1
            announced = self.round
        assert self._events is not None
        self._events.publish({"e": "scale", "round": announced})
        return announced

    def source_request_count(self, label: str) -> int:
        """How many clerk "source" requests this label has answered (for tests)."""
        with self._counter_lock:
            return self._source_requests[label]

    # -- server handlers ----------------------------------------------------

    def clerk_serve(self, request: dict, _conn=None) -> dict:
        command = request.get("c")
        if command == "chk":
            return {"r": "OK"}
        if command == "gate_ports":
            return {"r": "OK", "gates": self.config.ports_table.to_wire()["gates"]}
        if command == "scaling_ports":
            return {"r": "OK", "scaling": dict(self.config.ports_table.scaling),
                    "events": self.config.ports_table.events_port}
        if command == "source":
            package = self._package_for(request)
            if package is None:
                return {"r": "ERR", "error": f"unknown function label {request.get('label')!r}"}
            with self._counter_lock:
                self._source_requests[package.label] += 1
            return {"r": "OK", "label": package.label,
                    "source": package.source.decode("utf-8"),
                    "requirements": package.requirements.decode("utf-8")}
        if command == "digest":
            package = self._package_for(request)
            if package is None:
                return {"r": "ERR", "error": f"unknown function label {request.get('label')!r}"}
            return {"r": "OK", "label": package.label, "digest": package.digest}
        return {"r": "ERR", "error": f"unknown clerk command {command!r}"}

    def _package_for(self, request: dict) -> FunctionPackage | None:
        label = request.get("label")
        if not isinstance(label, str):
            return None
        return self.functions.get(label)

    def _make_scaling_handler(self, cluster_label: str):
        def scaling_serve(request: dict, _conn=None) -> dict:
            if request.get("c") != "scale_req":
                return {"r": "ERR", "error": f"unknown scaling command {request.get('c')!r}"}
            requested = request.get("cluster")
            if requested != cluster_label:
                return {"r": "ERR", "error": f"unknown cluster {requested!r} on this server"}
            # Grant and round are read under one lock so a concurrent reset
            # cannot pair a new round number with the old round's table.
            with self._round_lock:
                table = self.clusters[cluster_label].grant()
                round_now = self.round
            return {"r": "OK", "table": table.to_wire(), "round": round_now}
        return scaling_serve

    def _make_push_handler(self, gate: Gate):
        def gate_push_serve(request: dict, _conn=None) -> dict:
            if request.get("c") != "fer_req":
                return {"r": "ERR", "error": f"unknown gate command {request.get('c')!r}"}
            return {"r": "OK", "fer": gate.pop_fer()}
        return gate_push_serve

    def _make_pull_callback(self, gate: Gate):
        def gate_pull_ingest(message: dict) -> None:
            try:
                validate_ret(message)
            except ValidationError as exc:
                log.warning("pull-%s: dropped malformed RET: %s", gate.label, exc)
                return
            gate.ingest_ret(message)
        return gate_pull_ingest

    def methods_serve(self, request: dict, _conn=None) -> dict:
        """Framed-TCP facade over the methods space for out-of-process brokers."""
        command = request.get("c")
        try:
            if command == "push_fer":
                self.push_fer(request["label"], request["fer"])
                return {"r": "OK"}
            if command == "pop_ret":
                return {"r": "OK", "ret": self.pop_ret(request["label"])}
            if command == "check_available":
                return {"r": "OK", "available": self.check_available(request["label"])}
            if command == "autoscale":
                return {"r": "OK", "round": self.autoscale(request["directive"])}
            if command == "source_requests":
                return {"r": "OK", "count": self.source_request_count(request["label"])}
        except (ValidationError, ControllerError, KeyError) as exc:
            return {"r": "ERR", "error": f"{type(exc).__name__}: {exc}"}
        return {"r": "ERR", "error": f"unknown methods command {command!r}"}


def start(config: InitConfig) -> Controller:
    """Build and start a controller from the given configuration."""
    return Controller(config).start()
