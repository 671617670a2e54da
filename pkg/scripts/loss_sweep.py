"""Sweep the queue limit under BestEffort with a paused consumer and compare the
loss consumers observe with the discard counters the broker reports.

Usage::

    python3 scripts/loss_sweep.py [--events 5000] [--limits 10,100,1000] [--discard DiscardOldest]
"""

import argparse
import tempfile

from notibus.bench import BenchConfig, run_threads
from notibus.channel import DiscardPolicy

from reproduce_figures import start_broker


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--events", type=int, default=5000)
    p.add_argument("--limits", default="10,100,1000")
    p.add_argument("--discard", choices=[d.value for d in DiscardPolicy if d is not DiscardPolicy.REJECT_NEW], default="DiscardOldest")
    args = p.parse_args()
    limits = [int(x) for x in args.limits.split(",")]

    with tempfile.TemporaryDirectory() as data_dir:
        proc, broker = start_broker(data_dir)
        try:
            print("queue_limit,events_sent,events_delivered,consumer_gaps,broker_discarded,consistent")
            for limit in limits:
                cfg = BenchConfig(
                    broker=broker,
                    scales=(1,),
                    events_total=args.events,
                    queue_limit=limit,
                    discard_policy=DiscardPolicy(args.discard),
                    pause_consumers=True,
                    warmup_events=0,
                )
                (r,) = run_threads(cfg)
                print(f"{limit},{r.events_sent},{r.events_delivered},{r.gaps},{r.broker_discarded},{r.consistent}")
        finally:
            proc.terminate()
            proc.wait(10)


if __name__ == "__main__":
    main()
