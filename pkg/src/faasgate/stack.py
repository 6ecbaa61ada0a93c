"""Single-host stack assembly: controller plus nodes plus broker on free ports.

Ports are allocated from the OS, an init configuration is written under a
scratch directory, and everything is wired together so callers can scale and
run batches with a few lines.  Used by the CLI demo commands and the tests.
"""

from __future__ import annotations

import shutil
import tempfile
from pathlib import Path

from .broker import Broker
from .controller import Controller, InitConfig
from .deploy import default_functions_root
from .messages import AutoScaleDirective, GatePorts, PortsTable, ScalingTable
from .node import Node, NodeConfig
from .transport import free_port, wait_until


def build_init_config(functions_root: Path | str | None = None, *,
                      clusters: dict[str, int] | None = None,
                      host: str = "127.0.0.1",
                      with_methods_port: bool = False) -> InitConfig:
    """Allocate free ports for every server a controller needs."""
    root = Path(functions_root) if functions_root else default_functions_root()
    labels = sorted(p.name for p in root.iterdir() if p.is_dir())
    clusters = dict(clusters) if clusters else {"local": 1}
    # Sequential free_port calls can return duplicates; draw until distinct.
    needed = 2 * len(labels) + len(clusters) + 2 + (1 if with_methods_port else 0)
    ports: list[int] = []
    seen: set[int] = set()
    while len(ports) < needed:
        port = free_port(host)
        if port not in seen:
            seen.add(port)
            ports.append(port)
    draw = iter(ports)
    gates = {label: GatePorts(push=next(draw), pull=next(draw)) for label in labels}
    scaling = {cluster: next(draw) for cluster in clusters}
    return InitConfig(
        ports_table=PortsTable(gates=gates, scaling=scaling, events_port=next(draw)),
        clusters=clusters,
        functions_root=root,
        clerk_port=next(draw),
        host=host,
        methods_port=next(draw) if with_methods_port else None,
    )


class LocalStack:
    """A complete platform instance in one process tree."""

    def __init__(self, *, functions_root: Path | str | None = None,
                 nodes: int = 1, cluster: str = "local", backend: str = "process",
                 poll_interval: float = 0.010, poll_backoff_max: float = 0.200,
                 exec_timeout: float = 300.0, host: str = "127.0.0.1",
                 with_methods_port: bool = False, work_dir: Path | str | None = None):
        self.host = host
        self.cluster = cluster
        if work_dir is None:
            self.work_dir = Path(tempfile.mkdtemp(prefix="faasgate-stack-"))
            self._owns_work_dir = True
        else:
            self.work_dir = Path(work_dir)
            self.work_dir.mkdir(parents=True, exist_ok=True)
            self._owns_work_dir = False
        self.config = build_init_config(functions_root, clusters={cluster: nodes},
                                        host=host, with_methods_port=with_methods_port)
        self.config.save(self.work_dir / "config.json")
        self.controller: Controller | None = None
        self.nodes: list[Node] = []
        self.broker: Broker | None = None
        self._node_settings = dict(
            backend=backend, poll_interval=poll_interval,
            poll_backoff_max=poll_backoff_max, exec_timeout=exec_timeout)
        self._node_count = nodes

    def start(self, *, pair_timeout: float = 30.0) -> "LocalStack":
        self.controller = Controller(self.config).start()
        for index in range(self._node_count):
            node = Node(NodeConfig(
                clerk_host=self.host, clerk_port=self.config.clerk_port,
                cluster=self.cluster, host=self.host,
                run_dir=self.work_dir / f"node-{index}",
                **self._node_settings))
            self.nodes.append(node)
            node.start(wait=True, timeout=pair_timeout)
        self.broker = Broker(self.controller)
        return self

    # -- scaling helpers ----------------------------------------------------

    def scale(self, *tables, wait: bool = True, timeout: float = 60.0) -> int:
        """Autoscale with one table per positional argument.

        Each table is a list of (label, count, cpu) triples; pass no tables to
        scale every node out.  With ``wait`` the call returns only after every
        node has applied the announced round and the unit/agent counts match.
        """
        built = [table if isinstance(table, ScalingTable) else ScalingTable.of(*table)
                 for table in tables]
        directive = AutoScaleDirective({self.cluster: tuple(built)})
        announced = self.broker.autoscale(directive)
        if wait:
            expected_units = sum(t.total_units() for t in built)
            self.wait_for_round(announced, expected_units, timeout=timeout)
        return announced

    def wait_for_round(self, announced: int, expected_units: int, *,
                       timeout: float = 60.0) -> None:
        def settled() -> bool:
            if any(n.applied_round < announced for n in self.nodes):
                return False
            if any(n.state == "applying" for n in self.nodes):
                return False
            units = sum(len(n.live_endpoints()) for n in self.nodes)
            agents = sum(n.agent_count() for n in self.nodes)
            return units == expected_units and agents == expected_units

        wait_until(settled, timeout, message=f"round {announced} applied")
        failures = [n.last_error for n in self.nodes if n.last_error]
        if failures:
            raise RuntimeError(f"scaling round {announced} failed on some nodes: {failures}")

    # -- teardown -----------------------------------------------------------

    def close(self) -> None:
        for node in self.nodes:
            node.close()
        self.nodes.clear()
        if self.controller is not None:
            self.controller.close()
            self.controller = None
        if self._owns_work_dir:
            shutil.rmtree(self.work_dir, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
