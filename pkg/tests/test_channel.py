import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from notibus.channel import (
    DEFAULT_QOS,
    ChannelService,
    DiscardPolicy,
    EffectiveQos,
    OrderPolicy,
    PushStatus,
    QosProfile,
    Reliability,
    resolve_qos,
)
from notibus.errors import InvalidEvent, InvalidQos, NoSuchChannel, NoSuchProxy
from notibus.event import make_event
from notibus.filter import parse_constraint

from reference_filter import reference_eval

OLDEST, NEWEST, REJECT = DiscardPolicy.DISCARD_OLDEST, DiscardPolicy.DISCARD_NEWEST, DiscardPolicy.REJECT_NEW
FIFO, PRIORITY = OrderPolicy.FIFO, OrderPolicy.PRIORITY
BEST, RELIABLE = Reliability.BEST_EFFORT, Reliability.RELIABLE


def ev(n, **vh):
    return make_event("test", "n", body={"n": n}, variable_header=vh)


def ns(events):
    return [e.filterable_body["n"] for e in events]


class FakeClock:
    def __init__(self):
        self.now = 1_000_000_000

    def __call__(self):
        return self.now

    def advance_ms(self, ms):
        self.now += ms * 1_000_000


def setup(qos=DEFAULT_QOS, consumers=1, clock=None, **consumer_kw):
    svc = ChannelService(clock) if clock else ChannelService()
    ch = svc.create_channel(qos)
    sup = svc.connect_supplier(ch)
    cons = [svc.connect_consumer(ch, **consumer_kw) for _ in range(consumers)]
    return svc, ch, sup, cons


def assert_identity(svc, pid, limit=None):
    s = svc.stats(pid)
    assert s.enqueued == s.delivered + s.discarded + s.queued + s.in_flight
    if limit is not None:
        assert s.queued + s.in_flight <= limit
    return s


# -- channels and proxies


def test_channel_ids_monotonic():
    svc = ChannelService()
    assert svc.create_channel(QosProfile(1000, OLDEST, FIFO, BEST)) == 1
    assert svc.create_channel(DEFAULT_QOS) == 2


def test_incomplete_channel_qos():
    with pytest.raises(InvalidQos):
        ChannelService().create_channel(QosProfile(1000, OLDEST, FIFO, None))


def test_bad_qos_values():
    with pytest.raises(InvalidQos):
        QosProfile(queue_limit=0)
    with pytest.raises(InvalidQos):
        QosProfile(discard_policy="DropAll")
    with pytest.raises(InvalidQos):
        QosProfile.from_value({"queue_limit": 5, "colour": "red"})


def test_qos_value_round_trip():
    q = QosProfile(5, NEWEST, None, RELIABLE)
    assert QosProfile.from_value(q.to_value()) == q


def test_supplier_on_unknown_channel():
    svc = ChannelService()
    with pytest.raises(NoSuchChannel):
        svc.connect_supplier(99)
    with pytest.raises(NoSuchChannel):
        svc.connect_consumer(99)


def test_fifty_distinct_supplier_ids():
    svc = ChannelService()
    ch = svc.create_channel()
    assert len({svc.connect_supplier(ch) for _ in range(50)}) == 50


def test_role_mismatch():
    svc, ch, sup, (con,) = setup()
    with pytest.raises(NoSuchProxy):
        svc.push(con, ev(1))
    with pytest.raises(NoSuchProxy):
        svc.receive(sup, 1)


# -- delivery


def test_delivered_exactly_once():
    svc, ch, sup, (con,) = setup()
    assert svc.push(sup, ev(1)) is PushStatus.ACCEPTED
    assert ns(svc.receive(con, 10)) == [1]
    assert svc.receive(con, 10) == []


def test_no_replay_to_late_consumer():
    svc, ch, sup, _ = setup(consumers=0)
    svc.push(sup, ev(1))
    con = svc.connect_consumer(ch)
    svc.push(sup, ev(2))
    assert ns(svc.receive(con, 10)) == [2]


def test_fan_out_to_fifty_consumers():
    svc, ch, sup, cons = setup(consumers=50)
    for i in range(5):
        svc.push(sup, ev(i))
    for c in cons:
        assert ns(svc.receive(c, 10)) == list(range(5))


def test_filter_matches_oracle():
    text = "$.v > 0"
    svc, ch, sup, (con,) = setup(filter=parse_constraint(text))
    mixed = [make_event("d", "t", body=b) for b in (
        {"v": 1}, {"v": 0}, {"v": -2.5}, {"v": 0.5}, {"v": "x"}, {}, {"v": True}, {"v": 10**12},
    )]
    for e in mixed:
        svc.push(sup, e)
    expected = [e for e in mixed if reference_eval(parse_constraint(text), e)]
    assert svc.receive(con, 100) == expected
    assert len(expected) == 3


def test_subscription_applies():
    svc, ch, sup, (con,) = setup(subscription=[("PS", "*")])
    svc.push(sup, make_event("PS", "current"))
    svc.push(sup, make_event("RF", "current"))
    assert [e.header.domain_name for e in svc.receive(con, 10)] == ["PS"]


def test_set_filter_between_pushes():
    svc, ch, sup, (con,) = setup(filter=parse_constraint("$.n == 1"))
    svc.push(sup, ev(1))
    svc.set_filter(con, parse_constraint("$.n == 2"))
    svc.push(sup, ev(1))
    svc.push(sup, ev(2))
    svc.set_filter(con, None)
    svc.push(sup, ev(3))
    # The first event stays queued even though the new filter rejects it.
    assert ns(svc.receive(con, 10)) == [1, 2, 3]


def test_set_filter_unknown_proxy():
    with pytest.raises(NoSuchProxy):
        ChannelService().set_filter(7, None)


def test_invalid_event_rejected():
    svc, ch, sup, (con,) = setup()
    with pytest.raises(InvalidEvent):
        svc.push(sup, make_event("d", ""))
    assert svc.stats(con).enqueued == 0


def test_receive_examples():
    svc, ch, sup, (con,) = setup()
    assert svc.receive(con, 5) == []
    for i in (1, 2, 3):
        svc.push(sup, ev(i))
    assert ns(svc.receive(con, 2)) == [1, 2]
    assert ns(svc.receive(con, 2)) == [3]


def test_interleaved_receive_push_fifo():
    rng = random.Random(3)
    svc, ch, sup, (con,) = setup(filter=parse_constraint("$.n ~ 'k'"))
    pushed, got = [], []
    for i in range(500):
        if rng.random() < 0.6:
            n = rng.choice(["k", "x"]) + str(i)
            pushed.append(n)
            svc.push(sup, make_event("d", "t", body={"n": n}))
        else:
            got += ns(svc.receive(con, rng.randint(1, 4)))
    got += ns(svc.receive(con, 1000))
    assert got == [n for n in pushed if "k" in n]


# -- discard policies and ordering


def test_discard_oldest_keeps_last_ten():
    svc, ch, sup, (con,) = setup(QosProfile(10, OLDEST, FIFO, BEST))
    for i in range(1, 26):
        assert svc.push(sup, ev(i)) is PushStatus.ACCEPTED
    assert ns(svc.receive(con, 100)) == list(range(16, 26))
    s = assert_identity(svc, con)
    assert s.discarded == 15 and s.delivered == 10


def test_discard_newest_keeps_first_ten():
    svc, ch, sup, (con,) = setup(QosProfile(10, NEWEST, FIFO, BEST))
    for i in range(1, 26):
        svc.push(sup, ev(i))
    assert ns(svc.receive(con, 100)) == list(range(1, 11))
    assert svc.stats(con).discarded == 15


def test_priority_order():
    svc, ch, sup, (con,) = setup(QosProfile(10, OLDEST, PRIORITY, BEST))
    for i, p in enumerate((5, 1, 9)):
        svc.push(sup, ev(i, priority=p))
    assert [e.priority for e in svc.receive(con, 10)] == [9, 5, 1]


def test_priority_fifo_within_level():
    svc, ch, sup, (con,) = setup(QosProfile(100, OLDEST, PRIORITY, BEST))
    prios = [1, 3, 1, 3, 2, 1, 3]
    for i, p in enumerate(prios):
        svc.push(sup, ev(i, priority=p))
    got = svc.receive(con, 100)
    expected = sorted(range(len(prios)), key=lambda i: (-prios[i], i))
    assert ns(got) == expected


def test_priority_discard_oldest_drops_earliest_arrival():
    svc, ch, sup, (con,) = setup(QosProfile(2, OLDEST, PRIORITY, BEST))
    svc.push(sup, ev(0, priority=9))
    svc.push(sup, ev(1, priority=1))
    svc.push(sup, ev(2, priority=5))
    assert ns(svc.receive(con, 10)) == [2, 1]


def test_consumer_override_queue_limit():
    svc, ch, sup, _ = setup(consumers=0)
    con = svc.connect_consumer(ch, overrides=QosProfile(queue_limit=3))
    for i in range(10):
        svc.push(sup, ev(i))
    assert ns(svc.receive(con, 10)) == [7, 8, 9]


def test_timeout_zero_discarded():
    svc, ch, sup, (con,) = setup()
    svc.push(sup, ev(1, timeout_ms=0))
    assert svc.receive(con, 10) == []
    s = assert_identity(svc, con)
    assert s.discarded == 1 and s.delivered == 0


def test_timeout_expiry_with_clock():
    clock = FakeClock()
    svc, ch, sup, (con,) = setup(clock=clock)
    svc.push(sup, ev(1, timeout_ms=50))
    svc.push(sup, ev(2, timeout_ms=200))
    svc.push(sup, ev(3))
    clock.advance_ms(100)
    assert ns(svc.receive(con, 10)) == [2, 3]
    assert svc.stats(con).discarded == 1


def test_expired_entries_free_space():
    clock = FakeClock()
    svc, ch, sup, (con,) = setup(QosProfile(2, NEWEST, FIFO, BEST), clock=clock)
    svc.push(sup, ev(1, timeout_ms=10))
    svc.push(sup, ev(2, timeout_ms=10))
    clock.advance_ms(20)
    svc.push(sup, ev(3))
    assert ns(svc.receive(con, 10)) == [3]
    assert_identity(svc, con)


# -- disconnect


def test_disconnect_examples():
    svc, ch, sup, (c1, c2) = setup(consumers=2)
    svc.push(sup, ev(1))
    stats = svc.disconnect(c1)
    assert stats.discarded == 1 and stats.queued == 0
    assert svc.push(sup, ev(2)) is PushStatus.ACCEPTED
    assert ns(svc.receive(c2, 10)) == [1, 2]
    with pytest.raises(NoSuchProxy):
        svc.receive(c1, 1)
    svc.disconnect(c2)
    assert svc.push(sup, ev(3)) is PushStatus.ACCEPTED
    assert svc.disconnect(sup) is None
    with pytest.raises(NoSuchProxy):
        svc.push(sup, ev(4))
    with pytest.raises(NoSuchProxy):
        svc.disconnect(sup)


# -- QoS layering


def test_resolve_qos_examples():
    assert resolve_qos(DEFAULT_QOS, QosProfile(), {}) == EffectiveQos(1000, OLDEST, FIFO, BEST, 0, None)
    assert resolve_qos(DEFAULT_QOS, QosProfile(queue_limit=5), {}).queue_limit == 5
    eff = resolve_qos(DEFAULT_QOS, QosProfile(reliability=RELIABLE), {"priority": 7, "timeout_ms": 30})
    assert (eff.priority, eff.timeout_ms, eff.reliability) == (7, 30, RELIABLE)
    with pytest.raises(InvalidQos):
        resolve_qos(QosProfile(), QosProfile(), {})


# -- reliable delivery


def test_reliable_reject_is_all_or_nothing():
    svc, ch, sup, _ = setup(QosProfile(2, REJECT, FIFO, RELIABLE), consumers=0)
    fast = svc.connect_consumer(ch)
    slow = svc.connect_consumer(ch)
    assert svc.push(sup, ev(1)) is PushStatus.ACCEPTED
    svc.receive(fast, 10)
    assert svc.push(sup, ev(2)) is PushStatus.ACCEPTED
    svc.receive(fast, 10)
    # slow is full: nobody gets event 3
    assert svc.push(sup, ev(3)) is PushStatus.REJECTED
    assert svc.stats(fast).enqueued == 2
    assert ns(svc.receive(slow, 1)) == [1]
    assert svc.push(sup, ev(3)) is PushStatus.ACCEPTED
    assert ns(svc.receive(fast, 10)) == [3]
    assert ns(svc.receive(slow, 10)) == [2, 3]


def test_in_flight_counts_toward_limit_and_requeue_preserves_order():
    svc, ch, sup, (con,) = setup(QosProfile(3, REJECT, FIFO, RELIABLE))
    for i in (1, 2, 3):
        svc.push(sup, ev(i))
    taken = svc.take(con, 2)
    assert [s for s, _ in taken] == [1, 2]
    assert svc.push(sup, ev(4)) is PushStatus.REJECTED
    assert svc.requeue_in_flight(con) == 2
    taken = svc.take(con, 10)
    assert ns(e for _, e in taken) == [1, 2, 3]
    assert svc.ack(con, taken[1][0]) == 2
    svc.reject(con, taken[2][0])
    s = assert_identity(svc, con)
    assert (s.delivered, s.discarded, s.in_flight) == (2, 1, 0)


def test_reliable_exactly_once_with_retrying_suppliers():
    svc = ChannelService()
    ch = svc.create_channel(QosProfile(8, REJECT, FIFO, RELIABLE))
    cons = [svc.connect_consumer(ch) for _ in range(3)]
    n_suppliers, per_supplier = 4, 300
    received = {c: [] for c in cons}
    stop = threading.Event()

    def supplier(k):
        sid = svc.connect_supplier(ch)
        for i in range(per_supplier):
            e = make_event("s", "t", body={"s": k, "i": i})
            while svc.push(sid, e) is PushStatus.REJECTED:
                stop.wait(0.0001)

    def consumer(c, rng):
        while not stop.is_set() or svc.stats(c).queued:
            items = svc.take(c, rng.randint(1, 5))
            if items:
                received[c].extend((e.filterable_body["s"], e.filterable_body["i"]) for _, e in items)
                svc.ack(c, items[-1][0])
            else:
                stop.wait(0.0002)

    cthreads = [threading.Thread(target=consumer, args=(c, random.Random(c))) for c in cons]
    sthreads = [threading.Thread(target=supplier, args=(k,)) for k in range(n_suppliers)]
    for t in cthreads + sthreads:
        t.start()
    for t in sthreads:
        t.join()
    stop.set()
    for t in cthreads:
        t.join()
    for c in cons:
        got = received[c]
        assert len(got) == len(set(got)) == n_suppliers * per_supplier
        for k in range(n_suppliers):
            assert [i for s, i in got if s == k] == list(range(per_supplier))
        s = assert_identity(svc, c)
        assert s.discarded == 0


def test_per_pair_fifo_and_bounded_queue_under_threads():
    svc = ChannelService()
    ch = svc.create_channel(QosProfile(16, OLDEST, FIFO, BEST))
    con = svc.connect_consumer(ch)
    got = []
    done = threading.Event()
    violations = []

    def supplier(k):
        sid = svc.connect_supplier(ch)
        for i in range(2000):
            svc.push(sid, make_event("s", "t", body={"s": k, "i": i}))

    def consumer():
        while not done.is_set():
            s = svc.stats(con)
            if s.queued > 16:
                violations.append(s)
            got.extend(svc.receive(con, 3))
        got.extend(svc.receive(con, 1000))

    ct = threading.Thread(target=consumer)
    ct.start()
    sts = [threading.Thread(target=supplier, args=(k,)) for k in range(4)]
    for t in sts:
        t.start()
    for t in sts:
        t.join()
    done.set()
    ct.join()
    assert not violations
    for k in range(4):
        seq = [e.filterable_body["i"] for e in got if e.filterable_body["s"] == k]
        assert seq == sorted(seq) and len(set(seq)) == len(seq)
    s = assert_identity(svc, con, 16)
    assert s.delivered == len(got)


# -- randomized counter identity and discard laws

ops = st.lists(
    st.one_of(
        st.tuples(st.just("push"), st.integers(-2, 2), st.one_of(st.none(), st.integers(0, 5))),
        st.tuples(st.just("receive"), st.integers(1, 4)),
        st.tuples(st.just("take"), st.integers(1, 4)),
        st.tuples(st.just("ack"), st.integers(0, 3)),
        st.tuples(st.just("reject")),
        st.tuples(st.just("requeue")),
        st.tuples(st.just("tick"), st.integers(1, 4)),
    ),
    max_size=60,
)


@settings(max_examples=300)
@given(
    st.integers(1, 6),
    st.sampled_from(list(DiscardPolicy)),
    st.sampled_from(list(OrderPolicy)),
    st.sampled_from(list(Reliability)),
    ops,
)
def test_counter_identity_random_schedules(limit, discard, order, reliability, schedule):
    clock = FakeClock()
    svc, ch, sup, (con,) = setup(QosProfile(limit, discard, order, reliability), clock=clock)
    taken = []
    for i, op in enumerate(schedule):
        kind = op[0]
        if kind == "push":
            vh = {"priority": op[1]}
            if op[2] is not None:
                vh["timeout_ms"] = op[2]
            svc.push(sup, ev(i, **vh))
        elif kind == "receive":
            svc.receive(con, op[1])
        elif kind == "take":
            taken += [s for s, _ in svc.take(con, op[1])]
        elif kind == "ack" and taken:
            svc.ack(con, taken[min(op[1], len(taken) - 1)])
        elif kind == "reject" and taken:
            svc.reject(con, taken[-1])
        elif kind == "requeue":
            svc.requeue_in_flight(con)
        elif kind == "tick":
            clock.advance_ms(op[1])
        assert_identity(svc, con, limit)


@settings(max_examples=200)
@given(st.integers(1, 8), st.lists(st.one_of(st.just(0), st.integers(1, 3)), max_size=60))
def test_discard_oldest_queue_is_suffix(limit, schedule):
    """Undelivered events are always the most recent run of pushes."""
    svc, ch, sup, (con,) = setup(QosProfile(limit, OLDEST, FIFO, BEST))
    pushed, delivered = 0, []
    for step in schedule:
        if step == 0:
            pushed += 1
            svc.push(sup, ev(pushed))
        else:
            delivered += ns(svc.receive(con, step))
        s = svc.stats(con)
        assert s.queued == min(limit, pushed - len(delivered) - s.discarded)
    rest = ns(svc.receive(con, 100))
    assert rest == list(range(pushed - len(rest) + 1, pushed + 1))
    assert delivered + rest == sorted(delivered + rest)


@settings(max_examples=200)
@given(st.integers(1, 8), st.integers(0, 30), st.sampled_from([OLDEST, NEWEST]))
def test_paused_consumer_suffix_or_prefix(limit, n, policy):
    svc, ch, sup, (con,) = setup(QosProfile(limit, policy, FIFO, BEST))
    for i in range(1, n + 1):
        svc.push(sup, ev(i))
    got = ns(svc.receive(con, 100))
    k = min(limit, n)
    assert got == (list(range(n - k + 1, n + 1)) if policy is OLDEST else list(range(1, k + 1)))
    assert svc.stats(con).discarded == n - k
