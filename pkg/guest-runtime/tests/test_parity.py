"""End-to-end parity: a platform run on guest units matches the reference run.

Drives the platform purely through its public pieces (stack assembly, broker
batch API) twice, once per unit backend, and compares the observable outcome:
same result ids, same values, same report shape.
"""

from __future__ import annotations

import pytest

faasgate_stack = pytest.importorskip(
    "faasgate.stack", reason="platform package not installed alongside")

BATCH = 50
HELLO_VAL = {"ret": "Hello Cloud of Things!"}


def run_hello_batch(backend: str):
    with faasgate_stack.LocalStack(backend=backend, poll_interval=0.002,
                                   poll_backoff_max=0.010) as stack:
        stack.start()
        stack.scale([("hellocot", 4, 0.5)])
        assert stack.nodes[0].inventory()["backend"] == backend
        return stack.broker.run_batch("hellocot", BATCH, deadline=60.0)


def test_guest_run_indistinguishable_from_reference():
    reference = run_hello_batch("process")
    guest = run_hello_batch("guest")

    for report in (reference, guest):
        assert report.complete
        assert report.submitted == BATCH
        assert report.errored == 0

    ids = lambda report: sorted(r.fer_id for r in report.per_fer_records)
    assert ids(guest) == ids(reference)
    assert all(r.val == HELLO_VAL for r in guest.per_fer_records)
    assert all(r.val == HELLO_VAL for r in reference.per_fer_records)

    # Same statistics shape: identical report fields, same value types.
    ref_wire = reference.to_wire()
    guest_wire = guest.to_wire()
    assert set(ref_wire) == set(guest_wire)
    assert {k: type(v) for k, v in ref_wire.items()} \
        == {k: type(v) for k, v in guest_wire.items()}


def test_guest_units_execute_deployed_source(tmp_path):
    # The guest backend must run func.py from the deployed image, not any
    # compiled-in registry: a package whose source differs from its label's
    # usual behavior proves which path executed.
    import shutil

    from faasgate.deploy import default_functions_root

    functions_root = tmp_path / "functions"
    functions_root.mkdir()
    source = functions_root / "hellocot"
    shutil.copytree(default_functions_root() / "hellocot", source)
    (source / "func.py").write_text(
        'def f(FER):\n    return {"ret": "guest says hi"}\n', encoding="utf-8")

    with faasgate_stack.LocalStack(functions_root=functions_root,
                                   backend="guest", poll_interval=0.002,
                                   poll_backoff_max=0.010) as stack:
        stack.start()
        stack.scale([("hellocot", 2, 0.5)])
        report = stack.broker.run_batch("hellocot", 10, deadline=30.0)
    assert report.complete
    assert all(r.val == {"ret": "guest says hi"} for r in report.per_fer_records)
