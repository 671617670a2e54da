import csv

import pytest

from notibus.bench import (
    CSV_HEADER,
    BenchConfig,
    BenchResult,
    Scenario,
    emit_csv,
    format_csv,
    main,
    measure_latency,
    run_consumers,
    run_suppliers,
    run_threads,
)
from notibus.channel import DiscardPolicy, Reliability

RELIABLE, BEST = Reliability.RELIABLE, Reliability.BEST_EFFORT


def cfg(server, **kw):
    base = dict(broker=server.address, events_total=600, warmup_events=50, timeout_s=30, settle_s=0.3)
    return BenchConfig(**{**base, **kw})


def check_identity(r):
    assert r.events_delivered + r.events_lost == r.events_sent * r.consumer_count
    assert r.events_lost >= 0
    assert r.consistent, r
    assert not r.failed
    assert r.avg_per_event_ns == r.wall_time_ns // r.events_sent


@pytest.mark.parametrize(
    "kw",
    [{"scales": ()}, {"scales": (0, 1)}, {"scales": (3, 2)}, {"scales": (2, 2)}, {"events_total": 0}, {"queue_limit": 0}],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        BenchConfig(**kw)


def test_reliable_forces_reject_new():
    assert BenchConfig(reliability=RELIABLE).channel_qos().discard_policy is DiscardPolicy.REJECT_NEW
    assert BenchConfig().channel_qos().discard_policy is DiscardPolicy.DISCARD_OLDEST


def row(scenario, per_consumer):
    return BenchResult(scenario, 10, 100, 100, 0, 5000, 50, per_consumer)


def test_csv_format(tmp_path):
    assert format_csv([]) == ",".join(CSV_HEADER) + "\n"
    path = tmp_path / "out.csv"
    emit_csv([row(Scenario.THREADS, None), row(Scenario.CONSUMERS, 5)], str(path))
    rows = list(csv.reader(path.open()))
    assert rows[0] == list(CSV_HEADER)
    assert rows[1] == ["Threads", "10", "100", "100", "0", "5000", "50", "n/a"]
    assert rows[2][-1] == "5"
    emit_csv([], str(path))
    assert path.read_text() == ",".join(CSV_HEADER) + "\n"


def test_csv_to_stdout(capsys):
    emit_csv([row(Scenario.SUPPLIERS, None)], None)
    assert capsys.readouterr().out.splitlines()[1].startswith("Suppliers,10,")


def test_threads_scale_points(server):
    results = run_threads(cfg(server, scales=(1, 4)))
    assert [r.scale for r in results] == [1, 4]
    for r in results:
        check_identity(r)
        assert r.events_lost == 0 and r.avg_per_event_per_consumer_ns is None
    assert format_csv(results).splitlines()[1].endswith(",n/a")


def test_reliable_tiny_queue_retries_without_loss(server):
    (r,) = run_suppliers(cfg(server, scales=(3,), reliability=RELIABLE, queue_limit=4))
    check_identity(r)
    assert r.events_lost == 0 and r.duplicates == 0 and r.gaps == 0
    assert r.rejected_retries > 0


def test_best_effort_loss_matches_broker_counters(server):
    c = cfg(server, scales=(1,), queue_limit=10, pause_consumers=True, warmup_events=0)
    (r,) = run_threads(c)
    check_identity(r)
    assert r.events_delivered == 10 and r.events_lost == 590
    assert r.gaps == r.broker_discarded == 590


def test_best_effort_fan_out_loss(server):
    c = cfg(server, scales=(3,), queue_limit=25, pause_consumers=True, events_total=300)
    (r,) = run_consumers(c)
    check_identity(r)
    assert r.events_delivered == 75 and r.gaps == r.broker_discarded == 825


def test_consumers_fan_out(server):
    results = run_consumers(cfg(server, scales=(1, 3), events_total=400))
    for r in results:
        check_identity(r)
        assert r.events_delivered == r.scale * 400
        assert r.avg_per_event_per_consumer_ns == r.avg_per_event_ns // r.scale
    assert results[0].avg_per_event_per_consumer_ns == results[0].avg_per_event_ns


def test_one_supplier_equals_one_thread(server):
    (s,) = run_suppliers(cfg(server, scales=(1,)))
    (t,) = run_threads(cfg(server, scales=(1,)))
    for r in (s, t):
        check_identity(r)
        assert (r.consumer_count, r.events_delivered) == (1, 600)


def test_latency_small(server):
    res = measure_latency(server.address, events=200, warmup_events=20)
    assert res.lost == 0 and len(res.samples_ns) == 200
    assert res.percentile_ns(0.5) <= res.percentile_ns(0.99)


def test_cli(server, tmp_path, capsys):
    host, port = server.address
    out = tmp_path / "c.csv"
    code = main(["consumers", "--broker", f"{host}:{port}", "--scales", "2", "--events", "200", "--warmup", "10", "--csv", str(out)])
    assert code == 0
    assert "optimistic" in capsys.readouterr().err
    rows = list(csv.DictReader(out.open()))
    assert rows[0]["scenario"] == "Consumers" and rows[0]["events_delivered"] == "400"
    assert main(["latency", "--broker", f"{host}:{port}", "--events", "50", "--warmup", "5"]) == 0
    assert "median_ns=" in capsys.readouterr().out


def test_cli_errors(server):
    assert main(["threads", "--broker", "127.0.0.1:1", "--scales", "1", "--events", "10"]) == 2
    assert main(["threads", "--scales", "3,1"]) == 2
