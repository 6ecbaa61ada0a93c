"""Command line entry points: controller, node, and broker roles.

The controller and node commands run until interrupted.  The broker command
either drives an existing deployment through the controller's methods server
(``--connect``) or, for quick demonstrations, assembles a complete single-host
stack by itself, scales it, runs the workload, and tears it down.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .broker import (
    BrokerBase,
    BrokerError,
    RemoteBroker,
    scenario_a,
    scenario_b,
    write_csv,
    CSV_HEADER,
)
from .controller import Controller, InitConfig
from .messages import ValidationError
from .node import Node, NodeConfig, NodeError
from .stack import LocalStack, build_init_config


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _parse_host_port(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    try:
        return host, int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"port in {text!r} is not a number") from None


def _parse_clusters(text: str) -> dict[str, int]:
    clusters = {}
    for item in text.split(","):
        name, sep, count = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(
                f"expected NAME=COUNT[,NAME=COUNT...], got {text!r}")
        clusters[name.strip()] = int(count)
    return clusters


def _run_until_interrupt(close) -> int:
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        print("shutting down", file=sys.stderr)
        return 0
    finally:
        close()


# ---------------------------------------------------------------------------
# controller


def controller_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="faasgate-controller",
        description="Serve the control plane described by an init configuration.")
    parser.add_argument("--config", type=Path, help="init configuration JSON file")
    parser.add_argument("--generate", type=Path, metavar="OUT",
                        help="write a fresh configuration with free ports and exit")
    parser.add_argument("--functions-root", type=Path,
                        help="functions database directory (with --generate; "
                             "defaults to the bundled packages)")
    parser.add_argument("--clusters", type=_parse_clusters, default=None,
                        metavar="NAME=COUNT[,..]",
                        help="cluster node counts (with --generate; default local=1)")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--methods-port", action="store_true",
                        help="also allocate a framed-TCP methods server port "
                             "(with --generate)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    if args.generate:
        config = build_init_config(args.functions_root, clusters=args.clusters,
                                   host=args.host, with_methods_port=args.methods_port)
        config.save(args.generate)
        print(f"wrote {args.generate} (clerk {config.host}:{config.clerk_port})")
        return 0
    if not args.config:
        parser.error("either --config or --generate is required")
    try:
        config = InitConfig.load(args.config)
        controller = Controller(config).start()
    except Exception as exc:
        print(f"controller startup failed: {exc}", file=sys.stderr)
        return 1
    print(f"controller serving: clerk {config.host}:{config.clerk_port}, "
          f"{len(controller.gates)} gates, {len(controller.clusters)} clusters")
    return _run_until_interrupt(controller.close)


# ---------------------------------------------------------------------------
# node


def node_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="faasgate-node",
        description="Run a worker node that pairs with a controller's clerk.")
    parser.add_argument("--clerk", required=True, type=_parse_host_port,
                        metavar="HOST:PORT")
    parser.add_argument("--cluster", required=True)
    parser.add_argument("--backend", default="process",
                        choices=["process", "image", "guest", "container"])
    parser.add_argument("--poll-ms", type=float, default=10.0,
                        help="agent poll interval when the queue is empty")
    parser.add_argument("--backoff-ms", type=float, default=200.0,
                        help="maximum agent poll backoff")
    parser.add_argument("--exec-timeout", type=float, default=300.0,
                        help="seconds before a unit execution is abandoned")
    parser.add_argument("--host", default="127.0.0.1",
                        help="bind host for unit endpoints")
    parser.add_argument("--run-dir", type=Path)
    parser.add_argument("--cache-dir", type=Path)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    clerk_host, clerk_port = args.clerk
    try:
        node = Node(NodeConfig(
            clerk_host=clerk_host, clerk_port=clerk_port, cluster=args.cluster,
            backend=args.backend, poll_interval=args.poll_ms / 1000.0,
            poll_backoff_max=args.backoff_ms / 1000.0,
            exec_timeout=args.exec_timeout, host=args.host,
            run_dir=args.run_dir, cache_dir=args.cache_dir))
        node.start(wait=False)
    except NodeError as exc:
        print(f"node startup failed: {exc}", file=sys.stderr)
        return 1
    print(f"node started: clerk {clerk_host}:{clerk_port}, cluster {args.cluster}, "
          f"backend {args.backend}")
    return _run_until_interrupt(node.close)


# ---------------------------------------------------------------------------
# broker


def _add_connection_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--connect", type=_parse_host_port, metavar="HOST:PORT",
                        help="use a running controller's methods server instead "
                             "of assembling a local stack")
    parser.add_argument("--functions-root", type=Path,
                        help="functions database for the local stack")
    parser.add_argument("--feus", type=int, default=10,
                        help="units to scale up in the local stack")
    parser.add_argument("--backend", default="process",
                        choices=["process", "image", "guest", "container"])


def _with_broker(args, label: str, body) -> int:
    """Run body(broker) against --connect or a scaled throwaway stack."""
    if args.connect:
        broker = RemoteBroker(*args.connect)
        try:
            return body(broker)
        finally:
            broker.close()
    with LocalStack(functions_root=args.functions_root,
                    backend=args.backend) as stack:
        stack.start()
        stack.scale([(label, args.feus, 0.5)])
        return body(stack.broker)


def _print_report(report, report_path: Path | None) -> None:
    wire = report.to_wire()
    print(json.dumps(wire, indent=2, sort_keys=True))
    if report_path:
        report_path.write_text(json.dumps(wire, indent=2, sort_keys=True) + "\n",
                               encoding="utf-8")


def broker_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="faasgate-broker",
        description="Submit workloads and reproduce the benchmark scenarios.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="submit one batch and collect all results")
    p_run.add_argument("--label", default="hellocot")
    p_run.add_argument("--count", type=int, default=1000)
    p_run.add_argument("--deadline", type=float, default=120.0)
    p_run.add_argument("--report", type=Path, help="also write the report JSON here")
    _add_connection_args(p_run)

    p_a = sub.add_parser("scenario-a", help="iterated hellocot latency benchmark")
    p_a.add_argument("--iters", type=int, default=5)
    p_a.add_argument("--batch", type=int, default=1000)
    p_a.add_argument("--csv", type=Path, help="write per-iteration CSV here")
    _add_connection_args(p_a)

    p_b = sub.add_parser("scenario-b", help="FFT blocks verified against a local DFT")
    p_b.add_argument("--blocks", type=int, default=100)
    p_b.add_argument("--samples", type=int, default=256)
    p_b.add_argument("--seed", type=int, default=20240117)
    p_b.add_argument("--report", type=Path)
    _add_connection_args(p_b)

    p_s = sub.add_parser("scale", help="send an autoscale directive")
    p_s.add_argument("--directive", type=Path, required=True,
                     help="JSON file: {cluster: [[[label,count,cpu],...],...]}")
    p_s.add_argument("--connect", type=_parse_host_port, metavar="HOST:PORT",
                     required=True)
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    try:
        if args.command == "run":
            def body(broker: BrokerBase) -> int:
                report = broker.run_batch(args.label, args.count,
                                          deadline=args.deadline)
                _print_report(report, args.report)
                return 0 if report.complete else 1
            return _with_broker(args, args.label, body)

        if args.command == "scenario-a":
            def body(broker: BrokerBase) -> int:
                result = scenario_a(broker, iterations=args.iters, batch=args.batch)
                print(CSV_HEADER)
                for row in result.csv_rows:
                    print(row)
                print(f"# standalone mean: {result.standalone_mean * 1e6:.3f} us, "
                      f"platform overhead: {result.overhead_mean * 1000:.3f} ms")
                if args.csv:
                    write_csv(args.csv, result.csv_rows)
                return 0
            return _with_broker(args, "hellocot", body)

        if args.command == "scenario-b":
            def body(broker: BrokerBase) -> int:
                result = scenario_b(broker, blocks=args.blocks,
                                    samples=args.samples, seed=args.seed)
                print(f"verified {args.blocks} spectra, max relative error "
                      f"{result.max_rel_error:.3e}")
                _print_report(result.report, args.report)
                return 0
            return _with_broker(args, "fft", body)

        if args.command == "scale":
            directive = json.loads(args.directive.read_text(encoding="utf-8"))
            broker = RemoteBroker(*args.connect)
            try:
                announced = broker.autoscale(directive)
            finally:
                broker.close()
            print(f"scaling round {announced} announced")
            return 0
    except (BrokerError, ValidationError, OSError) as exc:
        print(f"broker command failed: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130
    parser.error(f"unhandled command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    """Dispatch ``python -m faasgate.cli ROLE ...`` to the role entry point."""
    argv = sys.argv[1:] if argv is None else argv
    roles = {"controller": controller_main, "node": node_main, "broker": broker_main}
    if not argv or argv[0] not in roles:
        print(f"usage: faasgate {{{','.join(roles)}}} ...", file=sys.stderr)
        return 2
    return roles[argv[0]](argv[1:])


if __name__ == "__main__":
    sys.exit(main())
