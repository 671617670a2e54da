"""Run the three scaling experiments against a private broker and write one CSV each.

Usage::

    python3 scripts/reproduce_figures.py --out results/ [--events 100000] [--qos besteffort]

A broker process is started on a free loopback port with a temporary data
directory and stopped afterwards, so nothing else needs to be running.
"""

import argparse
import os
import socket
import subprocess
import sys
import tempfile
import time

from notibus.bench import DEFAULT_SCALES, BenchConfig, Scenario, emit_csv, format_csv, measure_latency, run
from notibus.channel import Reliability


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def start_broker(data_dir):
    port = free_port()
    proc = subprocess.Popen(
        [sys.executable, "-m", "notibus.wire", "--listen", f"127.0.0.1:{port}",
         "--data-dir", data_dir, "--no-fsync", "--log-level", "warn"],
    )
    deadline = time.monotonic() + 10
    while time.monotonic() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            return proc, ("127.0.0.1", port)
        except OSError:
            if proc.poll() is not None:
                raise SystemExit("broker failed to start")
            time.sleep(0.05)
    proc.kill()
    raise SystemExit("broker did not start listening")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results")
    p.add_argument("--events", type=int, default=100_000)
    p.add_argument("--consumer-events", type=int, default=20_000, help="events per point in the fan-out run")
    p.add_argument("--qos", choices=["besteffort", "reliable"], default="reliable")
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--latency-events", type=int, default=10_000)
    args = p.parse_args()
    reliability = Reliability.RELIABLE if args.qos == "reliable" else Reliability.BEST_EFFORT
    os.makedirs(args.out, exist_ok=True)

    with tempfile.TemporaryDirectory() as data_dir:
        proc, broker = start_broker(data_dir)
        try:
            lat = measure_latency(broker, events=args.latency_events)
            print(f"latency: median {lat.median_ns / 1e6:.3f} ms, p99 {lat.percentile_ns(0.99) / 1e6:.3f} ms, lost {lat.lost}")
            for name in ("threads", "suppliers", "consumers"):
                events = args.consumer_events if name == "consumers" else args.events
                cfg = BenchConfig(
                    broker=broker,
                    scenario=Scenario(name.capitalize()),
                    scales=DEFAULT_SCALES[name],
                    events_total=events,
                    reliability=reliability,
                    repeat=args.repeat,
                    timeout_s=300,
                )
                t0 = time.monotonic()
                results = run(cfg)
                path = os.path.join(args.out, f"{name}.csv")
                emit_csv(results, path)
                print(f"{name}: {time.monotonic() - t0:.1f}s -> {path}")
                print(format_csv(results), end="")
        finally:
            proc.terminate()
            proc.wait(10)


if __name__ == "__main__":
    main()
