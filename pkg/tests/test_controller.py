"""Controller tests: startup validation, clerk, gates, scaling rounds, events."""

from __future__ import annotations

import socket
import struct
import threading

import pytest

from faasgate.controller import Controller, ControllerError, UnknownLabelError
from faasgate.framing import recv_frame, send_frame
from faasgate.messages import (
    AutoScaleDirective,
    FunctionPackage,
    GatePorts,
    PortsTable,
    ScalingTable,
    ValidationError,
)
from faasgate.stack import build_init_config
from faasgate.transport import one_shot_request


def make_fer(fer_id: str, x: dict | None = None) -> dict:
    return {"id": fer_id, "x": x or {}, "m": {}}


def scale_req(ctrl: Controller, cluster: str) -> dict:
    port = ctrl.config.ports_table.scaling[cluster]
    return one_shot_request(ctrl.config.host, port,
                            {"c": "scale_req", "cluster": cluster})


def clerk(ctrl: Controller, message: dict) -> dict:
    return one_shot_request(ctrl.config.host, ctrl.config.clerk_port, message)


class TestStartupValidation:
    def test_zero_functions_is_startup_error(self, tmp_path):
        config = build_init_config(tmp_path)  # empty directory: no packages
        with pytest.raises(ControllerError, match="no function packages"):
            Controller(config).start()

    def test_malformed_package_names_label(self, tmp_path):
        broken = tmp_path / "badpkg"
        broken.mkdir()
        (broken / "func.py").write_text("def f(FER):\n    return {}\n")
        # requirements.txt deliberately missing
        config = build_init_config(tmp_path)
        with pytest.raises(ControllerError, match="badpkg"):
            Controller(config).start()

    def test_gate_function_mismatch_rejected(self, tmp_path):
        package = tmp_path / "present"
        package.mkdir()
        (package / "func.py").write_text("def f(FER):\n    return {}\n")
        (package / "requirements.txt").write_text("")
        config = build_init_config(tmp_path)
        config.ports_table.gates["ghost"] = GatePorts(config.clerk_port + 1,
                                                      config.clerk_port + 2)
        with pytest.raises(ControllerError, match="ghost"):
            Controller(config).start()

    def test_duplicate_port_named_at_validation(self, functions_root):
        config = build_init_config(functions_root)
        some_label = next(iter(config.ports_table.gates))
        clash = config.ports_table.gates[some_label].push
        config.ports_table.scaling["local"] = clash
        with pytest.raises(ValidationError, match=str(clash)):
            Controller(config)

    def test_bind_conflict_names_port(self, functions_root):
        config = build_init_config(functions_root)
        blocker = socket.socket()
        blocker.bind((config.host, config.clerk_port))
        blocker.listen(1)
        try:
            with pytest.raises(ControllerError, match=str(config.clerk_port)):
                Controller(config).start()
        finally:
            blocker.close()


class TestClerk:
    def test_chk_ok(self, controller):
        assert clerk(controller, {"c": "chk"}) == {"r": "OK"}

    def test_gate_ports_directory(self, controller):
        reply = clerk(controller, {"c": "gate_ports"})
        assert reply["r"] == "OK"
        assert set(reply["gates"]) == set(controller.functions)
        hello = reply["gates"]["hellocot"]
        assert set(hello) == {"push", "pull"}

    def test_scaling_ports_directory(self, controller):
        reply = clerk(controller, {"c": "scaling_ports"})
        assert reply["r"] == "OK"
        assert reply["scaling"] == dict(controller.config.ports_table.scaling)
        assert reply["events"] == controller.config.ports_table.events_port

    def test_source_returns_package(self, controller):
        reply = clerk(controller, {"c": "source", "label": "hellocot"})
        assert reply["r"] == "OK"
        assert "Hello Cloud of Things!" in reply["source"]
        assert reply["label"] == "hellocot"
        assert isinstance(reply["requirements"], str)

    def test_source_counts_requests(self, controller):
        before = controller.source_request_count("echo")
        clerk(controller, {"c": "source", "label": "echo"})
        clerk(controller, {"c": "source", "label": "echo"})
        assert controller.source_request_count("echo") == before + 2

    def test_source_unknown_label(self, controller):
        reply = clerk(controller, {"c": "source", "label": "nosuch"})
        assert reply["r"] == "ERR"
        assert "nosuch" in reply["error"]

    def test_digest_matches_package_hash(self, controller, functions_root):
        reply = clerk(controller, {"c": "digest", "label": "fft"})
        assert reply["r"] == "OK"
        assert reply["digest"] == FunctionPackage.load(functions_root / "fft").digest

    def test_unknown_command_keeps_connection(self, controller):
        with socket.create_connection((controller.config.host,
                                       controller.config.clerk_port)) as sock:
            send_frame(sock, {"c": "mystery"})
            reply = recv_frame(sock)
            assert reply["r"] == "ERR"
            send_frame(sock, {"c": "chk"})
            assert recv_frame(sock) == {"r": "OK"}

    def test_malformed_frame_gets_error_reply_then_recovers(self, controller):
        with socket.create_connection((controller.config.host,
                                       controller.config.clerk_port)) as sock:
            sock.sendall(struct.pack(">I", 9) + b"{not json")
            reply = recv_frame(sock)
            assert reply["r"] == "ERR"
            assert "bad_frame" in reply["error"]
            send_frame(sock, {"c": "chk"})
            assert recv_frame(sock) == {"r": "OK"}


class TestGates:
    def _fetch(self, ctrl: Controller, label: str) -> dict | None:
        port = ctrl.config.ports_table.gates[label].push
        reply = one_shot_request(ctrl.config.host, port, {"c": "fer_req"})
        assert reply["r"] == "OK"
        return reply["fer"]

    def test_push_then_fetch_fifo(self, controller):
        for i in range(5):
            controller.push_fer("hellocot", make_fer(str(i)))
        got = [self._fetch(controller, "hellocot")["id"] for _ in range(5)]
        assert got == ["0", "1", "2", "3", "4"]
        assert self._fetch(controller, "hellocot") is None

    def test_empty_queue_null_reply(self, controller):
        assert self._fetch(controller, "echo") is None

    def test_push_unknown_label(self, controller):
        with pytest.raises(UnknownLabelError):
            controller.push_fer("nosuch", make_fer("1"))

    def test_push_invalid_fer(self, controller):
        with pytest.raises(ValidationError):
            controller.push_fer("hellocot", {"id": "1"})

    def test_bad_gate_command_rejected(self, controller):
        port = controller.config.ports_table.gates["hellocot"].push
        reply = one_shot_request(controller.config.host, port, {"c": "gimme"})
        assert reply["r"] == "ERR"

    def test_pull_ingest_and_pop_fifo(self, controller):
        port = controller.config.ports_table.gates["echo"].pull
        with socket.create_connection((controller.config.host, port)) as sock:
            for i in range(3):
                send_frame(sock, {"id": str(i), "ret": {"stat": "OK", "val": {}}})
        # Sink ingestion is asynchronous; wait for arrival.
        from faasgate.transport import wait_until
        wait_until(lambda: controller.gates["echo"].depth()[1] == 3, 5.0)
        assert controller.check_available("echo")
        assert [controller.pop_ret("echo")["id"] for _ in range(3)] == ["0", "1", "2"]
        assert controller.pop_ret("echo") is None
        assert not controller.check_available("echo")

    def test_check_available_is_pure(self, controller):
        controller.gates["echo"].ingest_ret({"id": "9", "ret": {"stat": "OK", "val": {}}})
        for _ in range(10):
            assert controller.check_available("echo")
        assert controller.pop_ret("echo")["id"] == "9"

    def test_malformed_ret_dropped(self, controller):
        port = controller.config.ports_table.gates["echo"].pull
        with socket.create_connection((controller.config.host, port)) as sock:
            send_frame(sock, {"id": "1", "ret": {"stat": "MAYBE", "val": {}}})
            send_frame(sock, {"nonsense": True})
            sock.sendall(struct.pack(">I", 3) + b"@@@")
            # A valid RET after the garbage proves the sink survived.
            send_frame(sock, {"id": "ok", "ret": {"stat": "OK", "val": {}}})
        from faasgate.transport import wait_until
        wait_until(lambda: controller.check_available("echo"), 5.0)
        assert controller.pop_ret("echo")["id"] == "ok"
        assert controller.pop_ret("echo") is None

    def test_concurrent_fetch_exactly_once(self, controller):
        total = 1000
        for i in range(total):
            controller.push_fer("hellocot", make_fer(str(i)))
        host = controller.config.host
        port = controller.config.ports_table.gates["hellocot"].push
        buckets: list[list[str]] = [[] for _ in range(10)]

        def worker(bucket: list[str]) -> None:
            with socket.create_connection((host, port)) as sock:
                while True:
                    send_frame(sock, {"c": "fer_req"})
                    fer = recv_frame(sock)["fer"]
                    if fer is None:
                        return
                    bucket.append(fer["id"])

        threads = [threading.Thread(target=worker, args=(b,)) for b in buckets]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=30)
        delivered = [fer_id for bucket in buckets for fer_id in bucket]
        assert len(delivered) == total
        assert sorted(delivered, key=int) == [str(i) for i in range(total)]


class TestScalingRounds:
    def _table(self, *entries) -> ScalingTable:
        return ScalingTable.of(*entries)

    def test_grants_in_request_order_then_null(self, controller):
        t1 = self._table(("hellocot", 1, 0.5))
        announced = controller.autoscale(AutoScaleDirective({"local": (t1,)}))
        first = scale_req(controller, "local")
        second = scale_req(controller, "local")
        assert first == {"r": "OK", "table": [["hellocot", 1, 0.5]], "round": announced}
        assert second == {"r": "OK", "table": [], "round": announced}

    def test_request_before_any_round_is_null_at_round_zero(self, controller):
        assert scale_req(controller, "local") == {"r": "OK", "table": [], "round": 0}

    def test_two_tables_assigned_in_arrival_order(self, controller):
        t1 = self._table(("hellocot", 1, 0.5))
        t2 = self._table(("echo", 2, 0.25))
        controller.autoscale(AutoScaleDirective({"local": (t1, t2)}))
        assert scale_req(controller, "local")["table"] == t1.to_wire()
        assert scale_req(controller, "local")["table"] == t2.to_wire()
        assert scale_req(controller, "local")["table"] == []

    def test_empty_directive_grants_null_to_all(self, controller):
        controller.autoscale(AutoScaleDirective({"local": ()}))
        for _ in range(3):
            assert scale_req(controller, "local")["table"] == []

    def test_new_round_cancels_previous(self, controller):
        t1 = self._table(("hellocot", 1, 0.5))
        t2 = self._table(("echo", 1, 0.5))
        controller.autoscale(AutoScaleDirective({"local": (t1,)}))
        controller.autoscale(AutoScaleDirective({"local": (t2,)}))
        # The first round's pending table is gone; only t2 remains.
        assert scale_req(controller, "local")["table"] == t2.to_wire()
        assert scale_req(controller, "local")["table"] == []

    def test_round_counter_increments(self, controller):
        first = controller.autoscale(AutoScaleDirective({"local": ()}))
        second = controller.autoscale(AutoScaleDirective({"local": ()}))
        assert second == first + 1

    def test_unknown_cluster_in_directive(self, controller):
        with pytest.raises(ValidationError, match="ghost"):
            controller.autoscale(AutoScaleDirective({"ghost": ()}))

    def test_too_many_tables_rejected(self, controller):
        tables = tuple(ScalingTable() for _ in range(4))  # cluster declares 3
        with pytest.raises(ValidationError):
            controller.autoscale(AutoScaleDirective({"local": tables}))

    def test_unknown_function_in_table_rejected(self, controller):
        with pytest.raises(UnknownLabelError, match="nosuch"):
            controller.autoscale(
                AutoScaleDirective({"local": (self._table(("nosuch", 1, 0.5)),)}))

    def test_wrong_cluster_request_gets_error(self, controller):
        port = controller.config.ports_table.scaling["local"]
        reply = one_shot_request(controller.config.host, port,
                                 {"c": "scale_req", "cluster": "ghost"})
        assert reply["r"] == "ERR"

    def test_event_published_per_round(self, controller):
        host = controller.config.host
        events_port = controller.config.ports_table.events_port
        with socket.create_connection((host, events_port)) as sub:
            assert recv_frame(sub) == {"e": "sub"}
            announced = controller.autoscale(AutoScaleDirective({"local": ()}))
            event = recv_frame(sub)
            assert event == {"e": "scale", "round": announced}
            announced2 = controller.autoscale(AutoScaleDirective({"local": ()}))
            assert recv_frame(sub) == {"e": "scale", "round": announced2}


class TestMethodsServer:
    def test_remote_methods_round_trip(self, functions_root):
        from faasgate.broker import RemoteBroker

        config = build_init_config(functions_root, with_methods_port=True)
        with Controller(config).start() as ctrl:
            broker = RemoteBroker(config.host, config.methods_port)
            try:
                broker.push_fer("hellocot", make_fer("42"))
                assert not broker.check_available("hellocot")
                ctrl.gates["hellocot"].ingest_ret(
                    {"id": "42", "ret": {"stat": "OK", "val": {}}})
                assert broker.check_available("hellocot")
                assert broker.pop_ret("hellocot")["id"] == "42"
                assert broker.pop_ret("hellocot") is None
                announced = broker.autoscale({"local": [[["hellocot", 1, 0.5]]]})
                assert announced == ctrl.round
            finally:
                broker.close()

    def test_remote_methods_error_surface(self, functions_root):
        from faasgate.broker import BrokerError, RemoteBroker

        config = build_init_config(functions_root, with_methods_port=True)
        with Controller(config).start():
            broker = RemoteBroker(config.host, config.methods_port)
            try:
                with pytest.raises(BrokerError, match="nosuch"):
                    broker.push_fer("nosuch", make_fer("1"))
            finally:
                broker.close()
