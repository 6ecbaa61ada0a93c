"""Shared fixtures: free-port init configs, live controllers, full stacks."""

from __future__ import annotations

from pathlib import Path

import pytest

from faasgate.controller import Controller
from faasgate.deploy import default_functions_root
from faasgate.stack import LocalStack, build_init_config

REPO_ROOT = Path(__file__).resolve().parent.parent
VECTORS_PATH = REPO_ROOT / "conformance" / "vectors.json"

# Tight polling so latency-sensitive tests run fast on loopback.
FAST_POLL = dict(poll_interval=0.002, poll_backoff_max=0.010)


@pytest.fixture
def functions_root() -> Path:
    return default_functions_root()


@pytest.fixture
def controller():
    """A running controller over the bundled functions, one 3-node cluster."""
    config = build_init_config(clusters={"local": 3})
    with Controller(config).start() as ctrl:
        yield ctrl


@pytest.fixture
def make_stack():
    """Factory for LocalStack instances; everything closes at test end."""
    stacks: list[LocalStack] = []

    def factory(**kwargs) -> LocalStack:
        kwargs.setdefault("poll_interval", FAST_POLL["poll_interval"])
        kwargs.setdefault("poll_backoff_max", FAST_POLL["poll_backoff_max"])
        stack = LocalStack(**kwargs)
        stacks.append(stack)
        return stack.start()

    yield factory
    for stack in stacks:
        stack.close()


@pytest.fixture
def stack(make_stack) -> LocalStack:
    return make_stack()
