"""Throughput and fan-out benchmarks against a running broker.

Three scenarios, one CSV row per scale point:

* ``threads``: one supplier session sending from ``t`` concurrent threads, one consumer.
* ``suppliers``: ``s`` supplier sessions sharing the event budget, one consumer.
* ``consumers``: one supplier, ``C`` consumers with empty filters (fan-out).

Every event carries ``{"ctx": sending context, "seq": 1..n}`` in its filterable
body so consumers can detect gaps and duplicates. Loss seen by consumers is
cross-checked against the broker's discard counters, which each consumer
proxy reports when it disconnects.
"""

from __future__ import annotations

import argparse
import csv
import enum
import io
import statistics
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

from .channel import DiscardPolicy, OrderPolicy, PushStatus, QosProfile, Reliability
from .errors import BrokerUnreachable, NotibusError
from .event import make_event
from .wire.client import Session
from .wire.server import DEFAULT_PORT, parse_address

CSV_HEADER = (
    "scenario",
    "scale",
    "events_sent",
    "events_delivered",
    "events_lost",
    "wall_time_ns",
    "avg_per_event_ns",
    "avg_per_event_per_consumer_ns",
)


class Scenario(str, enum.Enum):
    THREADS = "Threads"
    SUPPLIERS = "Suppliers"
    CONSUMERS = "Consumers"


@dataclass(frozen=True)
class BenchConfig:
    broker: tuple[str, int] = ("127.0.0.1", DEFAULT_PORT)
    scenario: Scenario = Scenario.THREADS
    scales: tuple[int, ...] = (1, 10, 30, 100)
    events_total: int = 100_000
    payload_bytes: int = 64
    reliability: Reliability = Reliability.BEST_EFFORT
    warmup_events: int = 1000
    csv_path: str | None = None
    queue_limit: int = 1000
    # Reliable runs always use RejectNew so that a full queue pushes back on suppliers.
    discard_policy: DiscardPolicy = DiscardPolicy.DISCARD_OLDEST
    # Consumers only subscribe after all events were sent, forcing overflow.
    pause_consumers: bool = False
    window: int = 16  # outstanding pushes per sending context
    timeout_s: float = 60.0
    settle_s: float = 0.5  # idle time after which missing events count as lost
    repeat: int = 1

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        object.__setattr__(self, "reliability", Reliability(self.reliability))
        object.__setattr__(self, "discard_policy", DiscardPolicy(self.discard_policy))
        object.__setattr__(self, "scales", tuple(self.scales))
        if not self.scales or any(type(s) is not int or s <= 0 for s in self.scales):
            raise ValueError("scale points must be positive ints")
        if any(a >= b for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("scale points must be ascending")
        if self.events_total <= 0:
            raise ValueError("events_total must be positive")
        if self.payload_bytes < 0 or self.warmup_events < 0:
            raise ValueError("payload_bytes and warmup_events must be non-negative")
        if self.queue_limit <= 0 or self.window <= 0 or self.repeat <= 0:
            raise ValueError("queue_limit, window and repeat must be positive")

    def channel_qos(self) -> QosProfile:
        reliable = self.reliability is Reliability.RELIABLE
        return QosProfile(
            queue_limit=self.queue_limit,
            discard_policy=DiscardPolicy.REJECT_NEW if reliable else self.discard_policy,
            order_policy=OrderPolicy.FIFO,
            reliability=self.reliability,
        )


@dataclass(frozen=True)
class BenchResult:
    scenario: Scenario
    scale: int
    events_sent: int
    events_delivered: int
    events_lost: int
    wall_time_ns: int
    avg_per_event_ns: int
    avg_per_event_per_consumer_ns: int | None
    # Diagnostics, not part of the CSV.
    consumer_count: int = 1
    gaps: int = 0
    duplicates: int = 0
    broker_discarded: int = 0
    broker_undelivered: int = 0
    rejected_retries: int = 0
    failed: bool = False

    @property
    def expected_deliveries(self) -> int:
        return self.events_sent * self.consumer_count

    @property
    def consistent(self) -> bool:
        """Consumer-observed gaps match what the broker says it dropped or still holds."""
        return self.gaps == self.broker_discarded + self.broker_undelivered

    def csv_row(self) -> list:
        last = "n/a" if self.avg_per_event_per_consumer_ns is None else self.avg_per_event_per_consumer_ns
        return [
            self.scenario.value,
            self.scale,
            self.events_sent,
            self.events_delivered,
            self.events_lost,
            self.wall_time_ns,
            self.avg_per_event_ns,
            last,
        ]


class _Tally:
    """Per-consumer record of which (ctx, seq) pairs arrived."""

    def __init__(self, plan: Sequence[int], expected: int, all_done: "_Countdown"):
        self.seen = [bytearray(n + 1) for n in plan]
        self.expected = expected
        self.unique = 0
        self.duplicates = 0
        self.unknown = 0
        self.last_ns = 0
        self._all_done = all_done

    def __call__(self, _seq: int, event: dict) -> None:
        self.last_ns = time.monotonic_ns()
        body = event["filterable_body"]
        ctx, seq = body.get("ctx"), body.get("seq")
        try:
            marks = self.seen[ctx]
            if seq < 1:
                raise IndexError(seq)
            hit = marks[seq]
        except (IndexError, TypeError):
            self.unknown += 1
            return
        if hit:
            self.duplicates += 1
            return
        marks[seq] = 1
        self.unique += 1
        if self.unique == self.expected:
            self._all_done.hit()


class _Countdown:
    def __init__(self, n: int):
        self._n = n
        self._lock = threading.Lock()
        self.event = threading.Event()
        if n == 0:
            self.event.set()

    def hit(self) -> None:
        with self._lock:
            self._n -= 1
            if self._n <= 0:
                self.event.set()


def _plan(total: int, contexts: int) -> list[int]:
    base, extra = divmod(total, contexts)
    return [base + (1 if i < extra else 0) for i in range(contexts)]


def _send_context(
    session: Session,
    proxy_id: int,
    ctx: int,
    count: int,
    payload: bytes,
    window: int,
    deadline: float,
    rejected: list[int],
) -> None:
    """Push seq 1..count for one sending context, pipelining up to ``window``
    requests and re-sending any push the broker rejected."""
    pending: deque = deque()
    retry: deque = deque()
    next_seq = 1
    retries = 0
    while next_seq <= count or pending or retry:
        while len(pending) < window and (retry or next_seq <= count):
            if retry:
                seq = retry.popleft()
            else:
                seq = next_seq
                next_seq += 1
            e = make_event("bench", "event", body={"ctx": ctx, "seq": seq}, payload=payload)
            pending.append((seq, session.push_async(proxy_id, e)))
        seq, fut = pending.popleft()
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise TimeoutError("sending context timed out")
        res = Session.result(fut, remaining)
        if res["status"] != PushStatus.ACCEPTED.value:
            retry.append(seq)
            retries += 1
            time.sleep(0.0005)
    rejected[ctx] = retries


def _warmup(cfg: BenchConfig, supplier_session: Session, consumer_session: Session) -> None:
    if cfg.warmup_events == 0:
        return
    qos = QosProfile(cfg.warmup_events, DiscardPolicy.DISCARD_OLDEST, OrderPolicy.FIFO, Reliability.BEST_EFFORT)
    ch = supplier_session.create_channel(qos)
    sup = supplier_session.connect_supplier(ch)
    con = consumer_session.connect_consumer(ch)
    done = threading.Event()
    got = [0]

    def count(_seq, _e):
        got[0] += 1
        if got[0] >= cfg.warmup_events:
            done.set()

    consumer_session.subscribe(con, handler=count, raw=True)
    payload = bytes(cfg.payload_bytes)
    futs = [
        supplier_session.push_async(sup, make_event("bench", "warmup", body={"seq": i}, payload=payload))
        for i in range(cfg.warmup_events)
    ]
    for f in futs:
        Session.result(f, cfg.timeout_s)
    done.wait(min(cfg.timeout_s, 5.0))
    consumer_session.disconnect(con)
    supplier_session.disconnect(sup)


def run_point(cfg: BenchConfig, scale: int, suppliers: int, contexts_per_supplier: int, consumers: int) -> BenchResult:
    """Measure one scale point on a fresh channel."""
    host, port = cfg.broker
    sessions: list[Session] = []

    def open_session() -> Session:
        s = Session(host, port, timeout=cfg.timeout_s)
        sessions.append(s)
        return s

    try:
        supplier_sessions = [open_session() for _ in range(suppliers)]
        consumer_sessions = [open_session() for _ in range(consumers)]
        _warmup(cfg, supplier_sessions[0], consumer_sessions[0])

        ch = supplier_sessions[0].create_channel(cfg.channel_qos())
        n_ctx = suppliers * contexts_per_supplier
        plan = _plan(cfg.events_total, n_ctx)
        countdown = _Countdown(consumers)
        tallies = [_Tally(plan, cfg.events_total, countdown) for _ in range(consumers)]
        consumer_ids = [cs.connect_consumer(ch) for cs in consumer_sessions]
        supplier_ids = [ss.connect_supplier(ch) for ss in supplier_sessions]

        def subscribe_all() -> None:
            for cs, pid, tally in zip(consumer_sessions, consumer_ids, tallies):
                cs.subscribe(pid, handler=tally, raw=True)

        if not cfg.pause_consumers:
            subscribe_all()

        payload = bytes(cfg.payload_bytes)
        rejected = [0] * n_ctx
        errors: list[BaseException] = []
        start = threading.Barrier(n_ctx + 1)
        deadline = time.monotonic() + cfg.timeout_s

        def sender(ss: Session, pid: int, ctx: int) -> None:
            start.wait()
            try:
                _send_context(ss, pid, ctx, plan[ctx], payload, cfg.window, deadline, rejected)
            except BaseException as e:  # reported after join
                errors.append(e)

        threads = []
        for si, (ss, pid) in enumerate(zip(supplier_sessions, supplier_ids)):
            for k in range(contexts_per_supplier):
                ctx = si * contexts_per_supplier + k
                threads.append(threading.Thread(target=sender, args=(ss, pid, ctx), daemon=True))
        for t in threads:
            t.start()
        t0 = time.monotonic_ns()
        start.wait()
        for t in threads:
            t.join(max(0.0, deadline - time.monotonic()))
        failed = bool(errors) or any(t.is_alive() for t in threads)

        if cfg.pause_consumers:
            subscribe_all()
        # Wait for every consumer to see every event, or for deliveries to go idle.
        last_total, last_change = -1, time.monotonic()
        while not countdown.event.wait(0.02):
            total = sum(t.unique + t.duplicates for t in tallies)
            now = time.monotonic()
            if total != last_total:
                last_total, last_change = total, now
            elif now - last_change >= cfg.settle_s:
                break
            if now >= deadline:
                failed = True
                break
        end_ns = max((t.last_ns for t in tallies), default=0) or time.monotonic_ns()

        discarded = undelivered = 0
        for cs, pid in zip(consumer_sessions, consumer_ids):
            stats = cs.disconnect(pid)
            if stats is not None:
                discarded += stats.discarded
                undelivered += stats.queued + stats.in_flight
        for ss, pid in zip(supplier_sessions, supplier_ids):
            ss.disconnect(pid)

        sent = cfg.events_total
        delivered = sum(t.unique for t in tallies)
        wall = max(0, end_ns - t0)
        avg = wall // sent
        return BenchResult(
            scenario=cfg.scenario,
            scale=scale,
            events_sent=sent,
            events_delivered=delivered,
            events_lost=sent * consumers - delivered,
            wall_time_ns=wall,
            avg_per_event_ns=avg,
            avg_per_event_per_consumer_ns=avg // consumers if cfg.scenario is Scenario.CONSUMERS else None,
            consumer_count=consumers,
            gaps=sum(t.expected - t.unique for t in tallies),
            duplicates=sum(t.duplicates for t in tallies),
            broker_discarded=discarded,
            broker_undelivered=undelivered,
            rejected_retries=sum(rejected),
            failed=failed,
        )
    finally:
        for s in sessions:
            s.close()


def _median_run(cfg: BenchConfig, scale: int, suppliers: int, contexts: int, consumers: int) -> BenchResult:
    runs = [run_point(cfg, scale, suppliers, contexts, consumers) for _ in range(cfg.repeat)]
    runs.sort(key=lambda r: r.wall_time_ns)
    return runs[(len(runs) - 1) // 2]


def run_threads(cfg: BenchConfig) -> list[BenchResult]:
    cfg = _with_scenario(cfg, Scenario.THREADS)
    return [_median_run(cfg, t, 1, t, 1) for t in cfg.scales]


def run_suppliers(cfg: BenchConfig) -> list[BenchResult]:
    cfg = _with_scenario(cfg, Scenario.SUPPLIERS)
    return [_median_run(cfg, s, s, 1, 1) for s in cfg.scales]


def run_consumers(cfg: BenchConfig) -> list[BenchResult]:
    cfg = _with_scenario(cfg, Scenario.CONSUMERS)
    return [_median_run(cfg, c, 1, 1, c) for c in cfg.scales]


RUNNERS = {
    Scenario.THREADS: run_threads,
    Scenario.SUPPLIERS: run_suppliers,
    Scenario.CONSUMERS: run_consumers,
}


def run(cfg: BenchConfig) -> list[BenchResult]:
    return RUNNERS[cfg.scenario](cfg)


def _with_scenario(cfg: BenchConfig, scenario: Scenario) -> BenchConfig:
    if cfg.scenario is scenario:
        return cfg
    return BenchConfig(**{**cfg.__dict__, "scenario": scenario})


def format_csv(results: Sequence[BenchResult]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in results:
        w.writerow(r.csv_row())
    return out.getvalue()


def emit_csv(results: Sequence[BenchResult], path: str | None) -> None:
    """Write results as CSV to ``path``, or to stdout when path is None or "-"."""
    text = format_csv(results)
    if path is None or path == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


# -- single-event latency


@dataclass
class LatencyResult:
    samples_ns: list[int] = field(default_factory=list)
    lost: int = 0

    @property
    def median_ns(self) -> float:
        return statistics.median(self.samples_ns)

    def percentile_ns(self, q: float) -> int:
        s = sorted(self.samples_ns)
        return s[min(len(s) - 1, int(q * len(s)))]


def measure_latency(
    broker: tuple[str, int],
    events: int = 10_000,
    payload_bytes: int = 64,
    reliability: Reliability = Reliability.RELIABLE,
    warmup_events: int = 500,
    timeout_s: float = 5.0,
) -> LatencyResult:
    """Send events one at a time and time each from push to delivery at the consumer."""
    host, port = broker
    with Session(host, port) as sup_s, Session(host, port) as con_s:
        qos = QosProfile(1000, DiscardPolicy.REJECT_NEW, OrderPolicy.FIFO, reliability)
        ch = sup_s.create_channel(qos)
        sup = sup_s.connect_supplier(ch)
        con = con_s.connect_consumer(ch)
        arrived = threading.Event()
        arrival = [0, 0]  # seq, timestamp

        def on_event(_seq, e):
            arrival[1] = time.monotonic_ns()
            arrival[0] = e["filterable_body"]["seq"]
            arrived.set()

        con_s.subscribe(con, handler=on_event, raw=True)
        payload = bytes(payload_bytes)
        result = LatencyResult()
        for i in range(-warmup_events, events):
            e = make_event("bench", "latency", body={"seq": i}, payload=payload)
            arrived.clear()
            t0 = time.monotonic_ns()
            fut = sup_s.push_async(sup, e)
            ok = arrived.wait(timeout_s) and arrival[0] == i
            Session.result(fut, timeout_s)
            if i < 0:
                continue
            if ok:
                result.samples_ns.append(arrival[1] - t0)
            else:
                result.lost += 1
        con_s.disconnect(con)
        sup_s.disconnect(sup)
    return result


# -- CLI


def _scales(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="notibus-bench", description="Benchmark a running notibus broker.")
    p.add_argument("scenario", choices=["threads", "suppliers", "consumers", "latency"])
    p.add_argument("--broker", default=f"127.0.0.1:{DEFAULT_PORT}", help="broker HOST:PORT")
    p.add_argument("--scales", type=_scales, default=None, help="comma-separated scale points")
    p.add_argument("--events", type=int, default=100_000, help="events per scale point")
    p.add_argument("--payload-bytes", type=int, default=64)
    p.add_argument("--qos", choices=["besteffort", "reliable"], default="besteffort")
    p.add_argument("--csv", default=None, help="output path (default stdout)")
    p.add_argument("--repeat", type=int, default=1, help="runs per scale point; the median row is reported")
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--queue-limit", type=int, default=1000)
    p.add_argument("--discard", choices=[d.value for d in DiscardPolicy], default=DiscardPolicy.DISCARD_OLDEST.value)
    p.add_argument("--pause-consumers", action="store_true", help="subscribe consumers only after sending")
    p.add_argument("--timeout", type=float, default=60.0, help="seconds per scale point")
    return p


DEFAULT_SCALES = {
    "threads": (1, 10, 30, 100),
    "suppliers": (10, 20, 30, 40, 50),
    "consumers": (10, 20, 30, 40, 50),
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    reliability = Reliability.RELIABLE if args.qos == "reliable" else Reliability.BEST_EFFORT
    try:
        broker = parse_address(args.broker)
    except ValueError as e:
        print(f"notibus-bench: {e}", file=sys.stderr)
        return 2
    print(
        "notibus-bench: warning: broker and clients share this machine, so results "
        "exclude network latency and are optimistic",
        file=sys.stderr,
    )
    try:
        if args.scenario == "latency":
            res = measure_latency(broker, args.events, args.payload_bytes, reliability, min(args.warmup, args.events))
            print(
                f"events={len(res.samples_ns)} lost={res.lost} median_ns={int(res.median_ns)} "
                f"p99_ns={res.percentile_ns(0.99)}"
            )
            return 1 if res.lost and reliability is Reliability.RELIABLE else 0
        cfg = BenchConfig(
            broker=broker,
            scenario=Scenario(args.scenario.capitalize()),
            scales=args.scales or DEFAULT_SCALES[args.scenario],
            events_total=args.events,
            payload_bytes=args.payload_bytes,
            reliability=reliability,
            warmup_events=args.warmup,
            csv_path=args.csv,
            queue_limit=args.queue_limit,
            discard_policy=DiscardPolicy(args.discard),
            pause_consumers=args.pause_consumers,
            timeout_s=args.timeout,
            repeat=args.repeat,
        )
        results = run(cfg)
    except ValueError as e:
        print(f"notibus-bench: {e}", file=sys.stderr)
        return 2
    except (BrokerUnreachable, NotibusError, TimeoutError) as e:
        print(f"notibus-bench: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    emit_csv(results, cfg.csv_path)
    status = 0
    for r in results:
        if r.failed:
            print(f"notibus-bench: scale {r.scale} timed out", file=sys.stderr)
            status = 1
        if not r.consistent:
            print(
                f"notibus-bench: scale {r.scale}: consumers saw {r.gaps} missing events but the broker "
                f"reports {r.broker_discarded} discarded and {r.broker_undelivered} undelivered",
                file=sys.stderr,
            )
            status = 1
        if reliability is Reliability.RELIABLE and (r.events_lost or r.duplicates):
            print(
                f"notibus-bench: scale {r.scale}: reliable run lost {r.events_lost} and duplicated "
                f"{r.duplicates} events",
                file=sys.stderr,
            )
            status = 1
    return status


if __name__ == "__main__":
    sys.exit(main())
