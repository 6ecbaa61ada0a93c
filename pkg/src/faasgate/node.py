"""Worker node: pairs with a controller, applies scaling tables, runs agents.

Lifecycle: ``start`` keeps probing the clerk until a liveness check passes,
caches the gate and scaling port directories, and subscribes to scaling
events.  Each event triggers one scaling-table request, and a freshly paired
node asks once on its own in case a round was announced before it subscribed.
Grant replies carry the round number, so a node never requests twice for the
same round.  Applying a table means stop agents, FIN every unit, deploy
missing images, spawn the new units, then start one agent per unit.
Application is all-or-nothing: any deployment or spawn failure rolls back to
an idle node.

Agents are plain threads: fetch an FER from the function's push server (polling
with exponential backoff when the queue is empty), run it on any free unit of
that function, push the RET to the pull server, repeat.
"""

from __future__ import annotations

import logging
import socket
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .backends import BackendError, FeuProcess, create_backend
from .deploy import ClerkClient, ClerkError, Deployer, DeploymentError
from .framing import ConnectionClosed, FrameError, recv_frame, send_frame
from .messages import (
    GatePorts,
    STAT_ERROR,
    ScalingTable,
    ValidationError,
    attach_id,
    strip_id,
)
from .transport import ReqRepClient, free_port, one_shot_request, wait_for_port

log = logging.getLogger(__name__)

ERROR_UNREACHABLE = "feu_unreachable"
ERROR_TIMEOUT = "feu_timeout"


class NodeError(Exception):
    """Node configuration or lifecycle failure."""


class ScalingError(NodeError):
    """A scaling table could not be applied; the node rolled back to idle."""


@dataclass
class NodeConfig:
    """Everything a node needs to know; the clerk address is the only contact."""

    clerk_host: str
    clerk_port: int
    cluster: str
    backend: str = "process"
    poll_interval: float = 0.010
    poll_backoff_max: float = 0.200
    exec_timeout: float = 300.0
    host: str = "127.0.0.1"
    run_dir: Path | None = None
    cache_dir: Path | None = None

    def validate(self) -> None:
        if self.poll_interval <= 0 or self.poll_backoff_max <= 0:
            raise NodeError("poll intervals must be positive")
        if self.poll_interval > self.poll_backoff_max:
            raise NodeError(
                f"poll_interval {self.poll_interval}s exceeds "
                f"poll_backoff_max {self.poll_backoff_max}s")
        if self.exec_timeout <= 0:
            raise NodeError("exec_timeout must be positive")
        if not self.cluster:
            raise NodeError("cluster label must be non-empty")


class FeuService:
    """Client half of one unit: a persistent EXE/FIN connection to one endpoint."""

    def __init__(self, host: str, port: int, *, exec_timeout: float,
                 connect_timeout: float = 5.0):
        self.host = host
        self.port = port
        self.exec_timeout = exec_timeout
        self.connect_timeout = connect_timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _connected(self) -> socket.socket:
        if self._sock is None:
            sock = socket.create_connection((self.host, self.port),
                                            timeout=self.connect_timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock = sock
        return self._sock

    def execute(self, inner: dict) -> tuple[str, dict]:
        """Run one EXE exchange; never raises, maps failures to ERROR pairs."""
        with self._lock:
            try:
                sock = self._connected()
                sock.settimeout(self.exec_timeout)
                send_frame(sock, {"c": "EXE", "fer": inner})
                reply = recv_frame(sock)
            except socket.timeout:
                # The unit may still be busy; drop the connection so a stale
                # late reply cannot be misread as the answer to a later EXE.
                self._drop()
                return STAT_ERROR, {"error": ERROR_TIMEOUT}
            except (OSError, FrameError):
                self._drop()
                return STAT_ERROR, {"error": ERROR_UNREACHABLE}
        stat = reply.get("stat")
        val = reply.get("val")
        if stat not in ("OK", "ERROR") or not isinstance(val, dict):
            return STAT_ERROR, {"error": ERROR_UNREACHABLE}
        return stat, val

    def fin(self, timeout: float = 2.0) -> bool:
        """Ask the unit to exit; True when it acknowledged the FIN."""
        with self._lock:
            try:
                sock = self._connected()
                sock.settimeout(timeout)
                send_frame(sock, {"c": "FIN"})
                reply = recv_frame(sock)
                return reply.get("stat") == "OK"
            except (OSError, FrameError, socket.timeout):
                return False
            finally:
                self._drop()

    def _drop(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def close(self) -> None:
        with self._lock:
            self._drop()


@dataclass
class FeuSlot:
    """One live unit: its process handle, endpoint, and client service."""

    label: str
    cpu_portion: float
    handle: FeuProcess
    service: FeuService
    slot_dir: Path
    busy: bool = False
    dead: bool = False

    @property
    def endpoint(self) -> tuple[str, int]:
        return self.handle.host, self.handle.port


class SlotRegistry:
    """Synchronized busy-flag bookkeeping over the node's slots."""

    def __init__(self):
        self._cond = threading.Condition()
        self._slots: list[FeuSlot] = []

    def install(self, slots: list[FeuSlot]) -> None:
        with self._cond:
            self._slots = list(slots)
            self._cond.notify_all()

    def clear(self) -> list[FeuSlot]:
        with self._cond:
            slots, self._slots = self._slots, []
            self._cond.notify_all()
            return slots

    def snapshot(self) -> list[FeuSlot]:
        with self._cond:
            return list(self._slots)

    def acquire(self, label: str, timeout: float) -> FeuSlot | None:
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                for slot in self._slots:
                    if slot.label == label and not slot.busy and not slot.dead:
                        slot.busy = True
                        return slot
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cond.wait(remaining)

    def release(self, slot: FeuSlot) -> None:
        with self._cond:
            slot.busy = False
            self._cond.notify_all()


class Agent(threading.Thread):
    """Fetch-execute-push loop for one function label."""

    _seq = 0
    _seq_lock = threading.Lock()

    def __init__(self, node: "Node", label: str, gate: GatePorts):
        with Agent._seq_lock:
            Agent._seq += 1
            seq = Agent._seq
        super().__init__(name=f"agent-{label}-{seq}", daemon=True)
        self.node = node
        self.label = label
        self.gate = gate
        self.stop_event = threading.Event()
        self._push_client = ReqRepClient(node.clerk.host, gate.push, timeout=30.0)
        self._pull_sock: socket.socket | None = None

    # -- fetch side ---------------------------------------------------------

    def _fetch(self) -> dict | None:
        try:
            reply = self._push_client.request({"c": "fer_req"})
        except (OSError, FrameError) as exc:
            log.debug("%s: push server unreachable: %s", self.name, exc)
            return None
        if reply.get("r") != "OK":
            log.warning("%s: push server rejected fetch: %s", self.name, reply)
            return None
        fer = reply.get("fer")
        return fer if isinstance(fer, dict) else None

    # -- push side ----------------------------------------------------------

    def _push_ret(self, ret: dict) -> None:
        # Fire-and-forget with reconnects; losing a RET would break the
        # push/pop conservation the broker relies on, so keep trying for a
        # couple of seconds before giving up.
        deadline = time.monotonic() + 10.0
        while True:
            try:
                if self._pull_sock is None:
                    self._pull_sock = socket.create_connection(
                        (self.node.clerk.host, self.gate.pull), timeout=5.0)
                    self._pull_sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                send_frame(self._pull_sock, ret)
                return
            except OSError as exc:
                if self._pull_sock is not None:
                    try:
                        self._pull_sock.close()
                    except OSError:
                        pass
                    self._pull_sock = None
                if time.monotonic() >= deadline:
                    log.error("%s: dropping RET %s: %s", self.name, ret.get("id"), exc)
                    return
                time.sleep(0.05)

    # -- main loop ----------------------------------------------------------

    def run(self) -> None:
        config = self.node.config
        backoff = config.poll_interval
        try:
            while not self.stop_event.is_set():
                fer = self._fetch()
                if fer is None:
                    if self.stop_event.wait(backoff):
                        break
                    backoff = min(backoff * 2, config.poll_backoff_max)
                    continue
                backoff = config.poll_interval
                self._serve_one(fer)
        finally:
            self._push_client.close()
            if self._pull_sock is not None:
                try:
                    self._pull_sock.close()
                except OSError:
                    pass

    def _serve_one(self, fer: dict) -> None:
        try:
            fer_id, inner = strip_id(fer)
        except ValidationError as exc:
            log.error("%s: discarding malformed FER from gate: %s", self.name, exc)
            return
        slot = self.node.slots.acquire(self.label, timeout=self.node.config.exec_timeout + 60.0)
        if slot is None:
            self._push_ret(attach_id(fer_id, STAT_ERROR, {"error": "no_slot_available"}))
            return
        try:
            stat, val = slot.service.execute(inner)
            if stat == STAT_ERROR and val.get("error") in (ERROR_TIMEOUT, ERROR_UNREACHABLE):
                self.node.recycle_slot(slot)
        finally:
            self.node.slots.release(slot)
        self._push_ret(attach_id(fer_id, stat, val))

    def stop(self) -> None:
        self.stop_event.set()


class Node:
    """One worker host process; owns slots, agents, and the scaling applier."""

    def __init__(self, config: NodeConfig):
        config.validate()
        self.config = config
        self.clerk = ClerkClient(config.clerk_host, config.clerk_port)
        self.backend = create_backend(config.backend)
        self.run_dir = Path(config.run_dir) if config.run_dir else Path(
            tempfile.mkdtemp(prefix="faasgate-node-"))
        self.run_dir.mkdir(parents=True, exist_ok=True)
        cache_dir = Path(config.cache_dir) if config.cache_dir else self.run_dir / "cache"
        self.deployer = Deployer(cache_dir, self.clerk)
        self.slots = SlotRegistry()
        self.state = "created"
        self.last_error: str | None = None
        # Highest round seen on the events channel / granted to a request
        # made by this node / fully processed locally.  requested_round
        # starts below any real round so the pairing-time request fires.
        self.seen_round = 0
        self.requested_round = -1
        self.applied_round = 0
        self.gate_ports: dict[str, GatePorts] = {}
        self.scaling_port: int | None = None
        self.events_port: int | None = None
        self._agents: list[Agent] = []
        self._agents_lock = threading.Lock()
        self._apply_lock = threading.Lock()
        self._closed = threading.Event()
        self._paired = threading.Event()
        self._subscribed = threading.Event()
        self._scale_notify = threading.Event()
        self._slot_seq = 0
        self._events_sock: socket.socket | None = None
        self._threads: list[threading.Thread] = []

    # -- lifecycle ----------------------------------------------------------

    def start(self, *, wait: bool = True, timeout: float = 30.0) -> "Node":
        if self.state != "created":
            raise NodeError(f"node already started (state {self.state})")
        self.state = "pairing"
        thread = threading.Thread(target=self._pairing_then_apply_loop,
                                  name="node-applier", daemon=True)
        self._threads.append(thread)
        thread.start()
        if wait and not self._paired.wait(timeout):
            self.close()
            raise NodeError(f"pairing with clerk {self.clerk.host}:{self.clerk.port} "
                            f"did not complete within {timeout:.1f}s")
        return self

    def _pairing_then_apply_loop(self) -> None:
        if not self._pair():
            return
        thread = threading.Thread(target=self._event_listener, name="node-events",
                                  daemon=True)
        self._threads.append(thread)
        thread.start()
        if not self._subscribed.wait(10.0) and not self._closed.is_set():
            log.warning("node: events subscription not acknowledged; continuing")
        self.state = "idle"
        self._paired.set()
        # A round may have been announced before this node subscribed; ask
        # once for any leftover grant instead of waiting for the next event.
        self._scale_notify.set()
        while not self._closed.is_set():
            if not self._scale_notify.wait(0.1):
                continue
            self._scale_notify.clear()
            if self.seen_round <= self.requested_round:
                continue
            granted = self._request_table()
            if granted is None or self._closed.is_set():
                continue
            table, granted_round = granted
            self.requested_round = max(self.requested_round, granted_round)
            try:
                self.apply_scaling(table)
            except ScalingError as exc:
                log.error("node: scaling failed, idling: %s", exc)
            finally:
                self.applied_round = max(self.applied_round, granted_round)

    def _pair(self) -> bool:
        delay = 0.1
        while not self._closed.is_set():
            try:
                self.clerk.chk()
                self.gate_ports = self.clerk.gate_ports()
                scaling, events = self.clerk.scaling_ports()
                if self.config.cluster not in scaling:
                    raise NodeError(
                        f"cluster {self.config.cluster!r} has no scaling port; "
                        f"controller serves {sorted(scaling)}")
                self.scaling_port = scaling[self.config.cluster]
                self.events_port = events
                log.info("node: paired with clerk %s:%d (cluster %s)",
                         self.clerk.host, self.clerk.port, self.config.cluster)
                return True
            except NodeError:
                self.last_error = "cluster not served by controller"
                log.exception("node: fatal pairing error")
                self.state = "failed"
                self._paired.set()
                return False
            except ClerkError as exc:
                log.debug("node: pairing retry: %s", exc)
                if self._closed.wait(delay):
                    return False
                delay = min(delay * 2, 1.0)
        return False

    def _event_listener(self) -> None:
        while not self._closed.is_set():
            try:
                sock = socket.create_connection((self.clerk.host, self.events_port),
                                                timeout=5.0)
            except OSError:
                if self._closed.wait(0.2):
                    return
                continue
            self._events_sock = sock
            sock.settimeout(None)
            try:
                while not self._closed.is_set():
                    event = recv_frame(sock)
                    kind = event.get("e")
                    if kind == "sub":
                        self._subscribed.set()
                    elif kind == "scale":
                        announced = event.get("round")
                        if isinstance(announced, int):
                            self.seen_round = max(self.seen_round, announced)
                        self._scale_notify.set()
            except (OSError, FrameError, ConnectionClosed):
                pass
            finally:
                self._events_sock = None
                try:
                    sock.close()
                except OSError:
                    pass
            self._closed.wait(0.2)

    def _request_table(self) -> tuple[ScalingTable, int] | None:
        delay = 0.05
        deadline = time.monotonic() + 15.0
        while not self._closed.is_set() and time.monotonic() < deadline:
            try:
                reply = one_shot_request(self.clerk.host, self.scaling_port,
                                         {"c": "scale_req", "cluster": self.config.cluster},
                                         timeout=5.0)
                if reply.get("r") != "OK":
                    log.error("node: scaling request rejected: %s", reply.get("error"))
                    return None
                granted_round = reply.get("round")
                if not isinstance(granted_round, int):
                    granted_round = self.seen_round
                return ScalingTable.from_wire(reply.get("table")), granted_round
            except (OSError, FrameError, ValidationError) as exc:
                log.debug("node: scaling request retry: %s", exc)
                if self._closed.wait(delay):
                    return None
                delay = min(delay * 2, 1.0)
        return None

    def close(self) -> None:
        self._closed.set()
        self._scale_notify.set()
        if self._events_sock is not None:
            try:
                self._events_sock.close()
            except OSError:
                pass
        with self._apply_lock:
            self._stop_agents()
            self._fin_all()
        self.state = "closed"
        for thread in self._threads:
            thread.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- scaling ------------------------------------------------------------

    def apply_scaling(self, table: ScalingTable) -> dict:
        """Flush, deploy, spawn, restart agents; returns the new inventory.

        Serialized: concurrent calls apply one after the other.  On any
        failure the node is left flushed and idle and ScalingError is raised.
        """
        with self._apply_lock:
            previous_state = self.state
            self.state = "applying"
            self._stop_agents()
            self._fin_all()
            if table.is_null:
                self.state = "idle"
                self.last_error = None
                log.info("node: scaled out (null table)")
                return self.inventory()
            try:
                images = {label: self.deployer.ensure(label) for label in table.labels()}
            except DeploymentError as exc:
                self.state = "idle"
                self.last_error = str(exc)
                raise ScalingError(f"deployment failed: {exc}") from exc
            new_slots: list[FeuSlot] = []
            try:
                for entry in table.entries:
                    for _ in range(entry.count):
                        new_slots.append(self._spawn_slot(
                            entry.label, entry.cpu, images[entry.label]))
            except (BackendError, NodeError, OSError) as exc:
                for slot in new_slots:
                    slot.service.close()
                    slot.handle.terminate()
                self.state = "idle"
                self.last_error = str(exc)
                raise ScalingError(f"unit spawn failed: {exc}") from exc
            self.slots.install(new_slots)
            self._start_agents(new_slots)
            self.state = "active"
            self.last_error = None
            log.info("node: applied table with %d units (%s)", len(new_slots),
                     ", ".join(f"{e.label}x{e.count}@{e.cpu}" for e in table.entries))
            return self.inventory()

    def _spawn_slot(self, label: str, cpu: float, image_dir: Path) -> FeuSlot:
        last_exc: Exception | None = None
        for _attempt in range(3):
            port = free_port(self.config.host)
            self._slot_seq += 1
            slot_dir = self.run_dir / "slots" / f"{label}-{self._slot_seq}"
            slot_dir.mkdir(parents=True, exist_ok=True)
            boot_path = slot_dir / "Boot"
            boot_path.write_text(f"{self.config.host}:{port}\n", encoding="utf-8")
            handle = self.backend.spawn(
                label=label, image_dir=image_dir, boot_path=boot_path,
                host=self.config.host, port=port, cpu_portion=cpu,
                log_path=slot_dir / "feu.log")
            try:
                wait_for_port(self.config.host, port, timeout=15.0)
            except TimeoutError as exc:
                handle.terminate()
                tail = handle.log_tail()
                last_exc = NodeError(
                    f"unit for {label!r} never listened on port {port}"
                    + (f"; log tail: {tail}" if tail else ""))
                log.warning("node: spawn attempt failed: %s", last_exc)
                continue
            service = FeuService(self.config.host, port,
                                 exec_timeout=self.config.exec_timeout)
            return FeuSlot(label=label, cpu_portion=cpu, handle=handle,
                           service=service, slot_dir=slot_dir)
        raise NodeError(f"unit spawn for {label!r} failed after 3 attempts: {last_exc}")

    def recycle_slot(self, slot: FeuSlot) -> None:
        """Replace a wedged unit in place; caller must hold the slot busy."""
        log.warning("node: recycling unit %s at %s:%d", slot.label, *slot.endpoint)
        slot.service.fin(timeout=1.0)
        slot.service.close()
        slot.handle.terminate()
        try:
            image_dir = self.deployer.ensure(slot.label)
            fresh = self._spawn_slot(slot.label, slot.cpu_portion, image_dir)
        except (DeploymentError, NodeError, BackendError) as exc:
            slot.dead = True
            self.last_error = f"recycle failed for {slot.label!r}: {exc}"
            log.error("node: %s", self.last_error)
            return
        slot.handle = fresh.handle
        slot.service = fresh.service
        slot.slot_dir = fresh.slot_dir

    # -- agents -------------------------------------------------------------

    def _start_agents(self, slots: list[FeuSlot]) -> None:
        with self._agents_lock:
            for slot in slots:
                agent = Agent(self, slot.label, self.gate_ports[slot.label])
                self._agents.append(agent)
                agent.start()

    def _stop_agents(self) -> None:
        with self._agents_lock:
            agents, self._agents = self._agents, []
        for agent in agents:
            agent.stop()
        for agent in agents:
            agent.join(timeout=self.config.exec_timeout + 30.0)
            if agent.is_alive():
                log.error("node: agent %s did not stop in time", agent.name)

    def _fin_all(self) -> None:
        for slot in self.slots.clear():
            if slot.service.fin():
                if slot.handle.wait(3.0) is None:
                    slot.handle.terminate()
            else:
                slot.handle.terminate()
            slot.service.close()

    # -- observation --------------------------------------------------------

    def agent_count(self) -> int:
        with self._agents_lock:
            return len(self._agents)

    def live_endpoints(self) -> list[tuple[str, int]]:
        return [slot.endpoint for slot in self.slots.snapshot()
                if not slot.dead and slot.handle.alive()]

    def feu_pids(self) -> list[int]:
        return [slot.handle.pid for slot in self.slots.snapshot()]

    def inventory(self) -> dict:
        slots = self.slots.snapshot()
        by_label: dict[str, int] = {}
        for slot in slots:
            by_label[slot.label] = by_label.get(slot.label, 0) + 1
        return {
            "state": self.state,
            "cluster": self.config.cluster,
            "backend": self.backend.name,
            "applied_round": self.applied_round,
            "agents": self.agent_count(),
            "units": [
                {"label": slot.label, "host": slot.endpoint[0],
                 "port": slot.endpoint[1], "cpu": slot.cpu_portion,
                 "pid": slot.handle.pid, "alive": slot.handle.alive()}
                for slot in slots
            ],
            "by_label": by_label,
            "last_error": self.last_error,
        }
