"""Broker SDK and benchmark harness over the controller's methods surface.

The broker owns user-facing work: it pushes FER batches, polls for RETs, and
turns the collected timestamps into latency statistics.  Two client flavors
share one implementation: ``Broker`` calls an in-process controller directly,
``RemoteBroker`` speaks to the optional framed-TCP methods server.

The harness half reproduces two experiment shapes: latency benchmarking of a
trivial function (batches of hellocot calls, CSV output per iteration) and a
numerics workload (FFT over sample blocks) whose results are checked against a
direct-summation DFT oracle implemented here, independently of the deployed
function.
"""

from __future__ import annotations

import functools
import math
import random
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .controller import Controller
from .messages import AutoScaleDirective, validate_ret
from .transport import ReqRepClient

CSV_HEADER = "iter,mean_ms,stddev_ms,wall_s"
DEFAULT_COLLECT_DEADLINE = 120.0


class BrokerError(Exception):
    """A broker call failed; partial progress is described in the message."""


class VerificationError(BrokerError):
    """A returned result disagrees with the local oracle."""


@dataclass
class FerRecord:
    """Per-FER bookkeeping: timestamps are perf_counter seconds."""

    fer_id: str
    submit_time: float
    collect_time: float | None = None
    stat: str | None = None
    val: dict | None = None

    @property
    def latency(self) -> float | None:
        if self.collect_time is None:
            return None
        return self.collect_time - self.submit_time


@dataclass
class RunReport:
    """Outcome of one submit/collect cycle with recomputable statistics."""

    label: str
    submitted: int
    completed: int
    errored: int
    mean_latency: float
    stddev_latency: float
    wall_time: float
    per_fer_records: list[FerRecord] = field(default_factory=list)
    missing_ids: list[str] = field(default_factory=list)
    unexpected_ids: list[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.missing_ids and self.completed + self.errored == self.submitted

    def to_wire(self) -> dict:
        return {
            "label": self.label,
            "submitted": self.submitted,
            "completed": self.completed,
            "errored": self.errored,
            "mean_latency_s": self.mean_latency,
            "stddev_latency_s": self.stddev_latency,
            "wall_time_s": self.wall_time,
            "complete": self.complete,
            "missing_ids": list(self.missing_ids),
            "unexpected_ids": list(self.unexpected_ids),
        }

    @classmethod
    def build(cls, label: str, records: Sequence[FerRecord], *,
              missing: Iterable[str] = (), unexpected: Iterable[str] = ()) -> "RunReport":
        collected = [r for r in records if r.collect_time is not None]
        latencies = [r.latency for r in collected]
        if collected:
            wall = (max(r.collect_time for r in collected)
                    - min(r.submit_time for r in records))
        else:
            wall = 0.0
        return cls(
            label=label,
            submitted=len(records),
            completed=sum(1 for r in collected if r.stat == "OK"),
            errored=sum(1 for r in collected if r.stat == "ERROR"),
            mean_latency=statistics.fmean(latencies) if latencies else 0.0,
            stddev_latency=statistics.pstdev(latencies) if len(latencies) > 1 else 0.0,
            wall_time=wall,
            per_fer_records=list(records),
            missing_ids=sorted(set(missing)),
            unexpected_ids=list(unexpected),
        )


class BrokerBase:
    """Submit/collect logic shared by the in-process and remote brokers."""

    # -- methods surface (implemented by subclasses) ------------------------

    def push_fer(self, label: str, fer: dict) -> None:
        raise NotImplementedError

    def pop_ret(self, label: str) -> dict | None:
        raise NotImplementedError

    def check_available(self, label: str) -> bool:
        raise NotImplementedError

    def autoscale(self, directive: AutoScaleDirective | dict) -> int:
        raise NotImplementedError

    # -- batch workflow ------------------------------------------------------

    def submit_batch(self, label: str, count: int,
                     input_maker: Callable[[int], dict] = lambda i: {},
                     *, ids: Sequence[str] | None = None,
                     metadata_maker: Callable[[int], dict] = lambda i: {},
                     ) -> list[FerRecord]:
        if ids is None:
            ids = [str(i) for i in range(count)]
        if len(ids) != count:
            raise BrokerError(f"need {count} ids, got {len(ids)}")
        if len(set(ids)) != count:
            raise BrokerError("batch ids must be unique")
        records: list[FerRecord] = []
        for index, fer_id in enumerate(ids):
            fer = {"id": fer_id, "x": input_maker(index), "m": metadata_maker(index)}
            try:
                stamp = time.perf_counter()
                self.push_fer(label, fer)
            except Exception as exc:
                raise BrokerError(
                    f"submission aborted after {len(records)}/{count} FERs "
                    f"(failed at id {fer_id!r}): {exc}") from exc
            records.append(FerRecord(fer_id=fer_id, submit_time=stamp))
        return records

    def collect_until(self, label: str, records: Sequence[FerRecord], *,
                      deadline: float = DEFAULT_COLLECT_DEADLINE,
                      poll_interval: float = 0.0005) -> RunReport:
        by_id = {r.fer_id: r for r in records}
        outstanding = set(by_id)
        unexpected: list[str] = []
        deadline_at = time.monotonic() + deadline
        while outstanding and time.monotonic() < deadline_at:
            if not self.check_available(label):
                time.sleep(poll_interval)
                continue
            ret = self.pop_ret(label)
            if ret is None:
                continue
            stamp = time.perf_counter()
            validate_ret(ret)
            record = by_id.get(ret["id"])
            if record is None or record.collect_time is not None:
                unexpected.append(ret["id"])
                continue
            record.collect_time = stamp
            record.stat = ret["ret"]["stat"]
            record.val = ret["ret"]["val"]
            outstanding.discard(ret["id"])
        return RunReport.build(label, list(records), missing=outstanding,
                               unexpected=unexpected)

    def run_batch(self, label: str, count: int,
                  input_maker: Callable[[int], dict] = lambda i: {}, *,
                  deadline: float = DEFAULT_COLLECT_DEADLINE) -> RunReport:
        records = self.submit_batch(label, count, input_maker)
        return self.collect_until(label, records, deadline=deadline)


class Broker(BrokerBase):
    """Function-call broker bound to an in-process controller."""

    def __init__(self, controller: Controller):
        self.controller = controller

    def push_fer(self, label: str, fer: dict) -> None:
        self.controller.push_fer(label, fer)

    def pop_ret(self, label: str) -> dict | None:
        return self.controller.pop_ret(label)

    def check_available(self, label: str) -> bool:
        return self.controller.check_available(label)

    def autoscale(self, directive: AutoScaleDirective | dict) -> int:
        return self.controller.autoscale(directive)


class RemoteBroker(BrokerBase):
    """Broker over the controller's framed-TCP methods server."""

    def __init__(self, host: str, port: int, *, timeout: float = 30.0):
        self.client = ReqRepClient(host, port, timeout=timeout)

    def _call(self, message: dict) -> dict:
        try:
            reply = self.client.request(message)
        except OSError as exc:
            raise BrokerError(f"methods server unreachable: {exc}") from exc
        if reply.get("r") != "OK":
            raise BrokerError(f"methods call {message.get('c')!r} failed: "
                              f"{reply.get('error')}")
        return reply

    def push_fer(self, label: str, fer: dict) -> None:
        self._call({"c": "push_fer", "label": label, "fer": fer})

    def pop_ret(self, label: str) -> dict | None:
        return self._call({"c": "pop_ret", "label": label}).get("ret")

    def check_available(self, label: str) -> bool:
        return bool(self._call({"c": "check_available", "label": label}).get("available"))

    def autoscale(self, directive: AutoScaleDirective | dict) -> int:
        if isinstance(directive, AutoScaleDirective):
            directive = directive.to_wire()
        return int(self._call({"c": "autoscale", "directive": directive}).get("round", 0))

    def close(self) -> None:
        self.client.close()


# ---------------------------------------------------------------------------
# Independent DFT oracle


@functools.lru_cache(maxsize=8)
def _twiddles(n: int) -> tuple[tuple[float, ...], tuple[float, ...]]:
    # exp(-2*pi*i*k/n) for k in 0..n-1; exponents are reused mod n.
    step = -2.0 * math.pi / n
    cos_table = tuple(math.cos(step * k) for k in range(n))
    sin_table = tuple(math.sin(step * k) for k in range(n))
    return cos_table, sin_table


def dft_direct(block: Sequence[float]) -> tuple[list[float], list[float]]:
    """O(N^2) direct-summation DFT of a real block; the verification oracle.

    Deliberately shares nothing with the deployed function (no numpy): the sum
    X[k] = sum_j x[j] * exp(-2*pi*i*j*k/N) is evaluated term by term with a
    precomputed twiddle table.
    """
    n = len(block)
    cos_table, sin_table = _twiddles(n)
    re = [0.0] * n
    im = [0.0] * n
    for k in range(n):
        acc_re = 0.0
        acc_im = 0.0
        for j, x in enumerate(block):
            idx = (j * k) % n
            acc_re += x * cos_table[idx]
            acc_im += x * sin_table[idx]
        re[k] = acc_re
        im[k] = acc_im
    return re, im


def spectrum_rel_error(reported: dict, oracle: tuple[Sequence[float], Sequence[float]]) -> float:
    """max over bins of |reported - oracle| / (1 + |oracle|), complex per bin."""
    oracle_re, oracle_im = oracle
    rep_re = reported.get("re")
    rep_im = reported.get("im")
    if (not isinstance(rep_re, list) or not isinstance(rep_im, list)
            or len(rep_re) != len(oracle_re) or len(rep_im) != len(oracle_im)):
        raise VerificationError("spectrum shape mismatch against oracle")
    worst = 0.0
    for k in range(len(oracle_re)):
        diff = math.hypot(rep_re[k] - oracle_re[k], rep_im[k] - oracle_im[k])
        scale = 1.0 + math.hypot(oracle_re[k], oracle_im[k])
        worst = max(worst, diff / scale)
    return worst


# ---------------------------------------------------------------------------
# Scenarios


@dataclass
class ScenarioAResult:
    reports: list[RunReport]
    csv_rows: list[str]
    standalone_mean: float
    overhead_mean: float


def time_standalone(fn: Callable[[dict], dict], *, calls: int = 1000) -> float:
    """Mean seconds per bare in-process call of a function body."""
    inner = {"x": {}, "m": {}}
    start = time.perf_counter()
    for _ in range(calls):
        fn(inner)
    return (time.perf_counter() - start) / calls


def scenario_a(broker: BrokerBase, *, label: str = "hellocot", iterations: int = 5,
               batch: int = 1000, deadline: float = DEFAULT_COLLECT_DEADLINE) -> ScenarioAResult:
    """Repeated batches of a trivial function; per-iteration latency CSV."""
    from .feu import REGISTRY

    reports: list[RunReport] = []
    rows: list[str] = []
    for iteration in range(iterations):
        report = broker.run_batch(label, batch, deadline=deadline)
        if not report.complete:
            raise BrokerError(
                f"iteration {iteration} incomplete: {len(report.missing_ids)} "
                f"missing of {report.submitted}")
        reports.append(report)
        rows.append(f"{iteration},{report.mean_latency * 1000:.3f},"
                    f"{report.stddev_latency * 1000:.3f},{report.wall_time:.3f}")
    standalone = time_standalone(REGISTRY[label]) if label in REGISTRY else 0.0
    batch_mean = statistics.fmean([r.mean_latency for r in reports]) if reports else 0.0
    return ScenarioAResult(
        reports=reports,
        csv_rows=rows,
        standalone_mean=standalone,
        overhead_mean=max(batch_mean - standalone, 0.0),
    )


@dataclass
class ScenarioBResult:
    report: RunReport
    max_rel_error: float


def make_blocks(count: int, samples: int, *, seed: int = 20240117) -> list[list[float]]:
    rng = random.Random(seed)
    return [[rng.uniform(-1.0, 1.0) for _ in range(samples)] for _ in range(count)]


def scenario_b(broker: BrokerBase, *, label: str = "fft", blocks: int = 100,
               samples: int = 256, seed: int = 20240117,
               deadline: float = DEFAULT_COLLECT_DEADLINE,
               tolerance: float = 1e-9) -> ScenarioBResult:
    """Transform random sample blocks remotely; verify against the local DFT."""
    data = make_blocks(blocks, samples, seed=seed)
    report = broker.run_batch(label, blocks, lambda i: {"block": data[i]},
                              deadline=deadline)
    if not report.complete:
        raise BrokerError(f"{len(report.missing_ids)} blocks missing of {blocks}")
    worst = 0.0
    for record in report.per_fer_records:
        index = int(record.fer_id)
        if record.stat != "OK":
            raise VerificationError(
                f"block {index} failed remotely: {record.val}")
        error = spectrum_rel_error(record.val, dft_direct(data[index]))
        worst = max(worst, error)
        if error > tolerance:
            raise VerificationError(
                f"block {index} spectrum off by {error:.3e} (tolerance {tolerance:.0e})")
    return ScenarioBResult(report=report, max_rel_error=worst)


def write_csv(path: Path | str, rows: Iterable[str]) -> None:
    text = "\n".join([CSV_HEADER, *rows])
    Path(path).write_text(text + "\n", encoding="utf-8")
