"""Event channels: supplier/consumer proxies, bounded per-consumer queues,
filtering and QoS-driven fan-out.

Every consumer proxy owns one queue. A push is matched against each
consumer's subscription and filter under the channel lock, so dispatch per
channel is linearizable. Listeners registered on a consumer are called after
the lock is released, once per push that enqueued something for it.

Counter identity per consumer, at every observable instant::

    enqueued == delivered + discarded + queued + in_flight
"""

from __future__ import annotations

import bisect
import enum
import itertools
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .errors import InvalidEvent, InvalidQos, NoSuchChannel, NoSuchProxy
from .event import StructuredEvent, validate_event
from .filter import Constraint, Subscription, eval_constraint, match_subscription


class DiscardPolicy(str, enum.Enum):
    DISCARD_OLDEST = "DiscardOldest"
    DISCARD_NEWEST = "DiscardNewest"
    REJECT_NEW = "RejectNew"


class OrderPolicy(str, enum.Enum):
    FIFO = "Fifo"
    PRIORITY = "Priority"


class Reliability(str, enum.Enum):
    BEST_EFFORT = "BestEffort"
    RELIABLE = "Reliable"


@dataclass(frozen=True)
class QosProfile:
    """QoS settings; ``None`` means "inherit from the level below"."""

    queue_limit: int | None = None
    discard_policy: DiscardPolicy | None = None
    order_policy: OrderPolicy | None = None
    reliability: Reliability | None = None

    def __post_init__(self):
        ql = self.queue_limit
        if ql is not None and (type(ql) is not int or ql < 1):
            raise InvalidQos(f"queue_limit must be an int >= 1, got {ql!r}")
        try:
            if self.discard_policy is not None:
                object.__setattr__(self, "discard_policy", DiscardPolicy(self.discard_policy))
            if self.order_policy is not None:
                object.__setattr__(self, "order_policy", OrderPolicy(self.order_policy))
            if self.reliability is not None:
                object.__setattr__(self, "reliability", Reliability(self.reliability))
        except ValueError as e:
            raise InvalidQos(str(e)) from None

    def is_complete(self) -> bool:
        return None not in (self.queue_limit, self.discard_policy, self.order_policy, self.reliability)

    def to_value(self) -> dict:
        out: dict = {}
        if self.queue_limit is not None:
            out["queue_limit"] = self.queue_limit
        for name in ("discard_policy", "order_policy", "reliability"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v.value
        return out

    @classmethod
    def from_value(cls, v: Mapping | None) -> "QosProfile":
        if v is None:
            return cls()
        if not isinstance(v, Mapping):
            raise InvalidQos("qos must be a map")
        unknown = set(v) - {"queue_limit", "discard_policy", "order_policy", "reliability"}
        if unknown:
            raise InvalidQos(f"unknown qos fields: {sorted(unknown)}")
        return cls(**v)


DEFAULT_QOS = QosProfile(1000, DiscardPolicy.DISCARD_OLDEST, OrderPolicy.FIFO, Reliability.BEST_EFFORT)


@dataclass(frozen=True)
class EffectiveQos:
    queue_limit: int
    discard_policy: DiscardPolicy
    order_policy: OrderPolicy
    reliability: Reliability
    priority: int = 0
    timeout_ms: int | None = None


def resolve_qos(channel_qos: QosProfile, proxy_qos: QosProfile, variable_header: Mapping) -> EffectiveQos:
    """Layer event hints over proxy overrides over channel defaults, field by field."""
    if not channel_qos.is_complete():
        raise InvalidQos("channel qos must set every field")
    p = proxy_qos
    priority = variable_header.get("priority", 0)
    timeout = variable_header.get("timeout_ms")
    return EffectiveQos(
        p.queue_limit if p.queue_limit is not None else channel_qos.queue_limit,
        p.discard_policy if p.discard_policy is not None else channel_qos.discard_policy,
        p.order_policy if p.order_policy is not None else channel_qos.order_policy,
        p.reliability if p.reliability is not None else channel_qos.reliability,
        priority if type(priority) is int else 0,
        timeout if type(timeout) is int and timeout >= 0 else None,
    )


class PushStatus(str, enum.Enum):
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"


@dataclass(frozen=True)
class ConsumerStats:
    enqueued: int
    delivered: int
    discarded: int
    queued: int
    in_flight: int

    def to_value(self) -> dict:
        return {
            "enqueued": self.enqueued,
            "delivered": self.delivered,
            "discarded": self.discarded,
            "queued": self.queued,
            "in_flight": self.in_flight,
        }


class _Entry:
    __slots__ = ("seq", "priority", "deadline_ns", "event")

    def __init__(self, seq: int, priority: int, deadline_ns: int | None, event: StructuredEvent):
        self.seq = seq
        self.priority = priority
        self.deadline_ns = deadline_ns
        self.event = event


def _priority_key(entry: _Entry):
    return (-entry.priority, entry.seq)


class _ConsumerProxy:
    def __init__(self, proxy_id: int, channel: "_Channel", subscription, filter, overrides: QosProfile):
        self.proxy_id = proxy_id
        self.channel = channel
        self.subscription = list(subscription)
        self.filter = filter
        self.overrides = overrides
        base = resolve_qos(channel.default_qos, overrides, {})
        self.queue_limit = base.queue_limit
        self.order_policy = base.order_policy
        self.reliability = base.reliability
        self.discard_policy = base.discard_policy
        self.queue: deque[_Entry] | list[_Entry] = [] if self.order_policy is OrderPolicy.PRIORITY else deque()
        self.in_flight: dict[int, _Entry] = {}
        self.next_seq = 1
        self.next_delivery = 1
        self.enqueued = 0
        self.delivered = 0
        self.discarded = 0
        self.listener: Callable[[int], None] | None = None

    def occupancy(self) -> int:
        return len(self.queue) + len(self.in_flight)

    def purge_expired(self, now: int) -> None:
        q = self.queue
        if not q:
            return
        keep = [e for e in q if e.deadline_ns is None or e.deadline_ns > now]
        dropped = len(q) - len(keep)
        if dropped:
            self.discarded += dropped
            if isinstance(q, deque):
                self.queue = deque(keep)
            else:
                self.queue = keep

    def is_full(self, now: int) -> bool:
        if self.occupancy() < self.queue_limit:
            return False
        self.purge_expired(now)
        return self.occupancy() >= self.queue_limit

    def offer(self, event: StructuredEvent, qos: EffectiveQos, now: int) -> bool:
        """Enqueue one copy; returns whether the event is now in the queue."""
        self.enqueued += 1
        entry = _Entry(
            self.next_seq,
            qos.priority,
            None if qos.timeout_ms is None else now + qos.timeout_ms * 1_000_000,
            event,
        )
        self.next_seq += 1
        if self.is_full(now):
            if qos.discard_policy is DiscardPolicy.DISCARD_OLDEST and self.queue:
                self._drop_oldest()
            else:
                # DiscardNewest, or RejectNew that was not allowed to reject
                self.discarded += 1
                return False
        if self.order_policy is OrderPolicy.PRIORITY:
            bisect.insort(self.queue, entry, key=_priority_key)
        else:
            self.queue.append(entry)
        return True

    def _drop_oldest(self) -> None:
        q = self.queue
        if isinstance(q, deque):
            q.popleft()
        else:
            i = min(range(len(q)), key=lambda j: q[j].seq)
            del q[i]
        self.discarded += 1

    def pop_live(self, now: int) -> _Entry | None:
        q = self.queue
        while q:
            entry = q.popleft() if isinstance(q, deque) else q.pop(0)
            if entry.deadline_ns is not None and entry.deadline_ns <= now:
                self.discarded += 1
                continue
            return entry
        return None

    def stats(self) -> ConsumerStats:
        return ConsumerStats(self.enqueued, self.delivered, self.discarded, len(self.queue), len(self.in_flight))


@dataclass
class _SupplierProxy:
    proxy_id: int
    channel: "_Channel"
    overrides: QosProfile


@dataclass
class _Channel:
    channel_id: int
    default_qos: QosProfile
    lock: threading.Lock = field(default_factory=threading.Lock)
    suppliers: dict[int, _SupplierProxy] = field(default_factory=dict)
    consumers: dict[int, _ConsumerProxy] = field(default_factory=dict)


class ChannelService:
    """The notify core: every channel and proxy of one broker."""

    def __init__(self, clock: Callable[[], int] = time.monotonic_ns):
        self._clock = clock
        self._lock = threading.Lock()
        self._channels: dict[int, _Channel] = {}
        self._proxies: dict[int, _SupplierProxy | _ConsumerProxy] = {}
        self._channel_ids = itertools.count(1)
        self._proxy_ids = itertools.count(1)

    # -- channels and proxies

    def create_channel(self, default_qos: QosProfile = DEFAULT_QOS) -> int:
        if not default_qos.is_complete():
            raise InvalidQos("channel qos must set every field")
        with self._lock:
            cid = next(self._channel_ids)
            self._channels[cid] = _Channel(cid, default_qos)
        return cid

    def channel_ids(self) -> list[int]:
        with self._lock:
            return sorted(self._channels)

    def has_channel(self, channel_id: int) -> bool:
        return channel_id in self._channels

    def _channel(self, channel_id: int) -> _Channel:
        try:
            return self._channels[channel_id]
        except (KeyError, TypeError):
            raise NoSuchChannel(f"no channel {channel_id!r}") from None

    def _consumer(self, proxy_id: int) -> _ConsumerProxy:
        p = self._proxies.get(proxy_id)
        if not isinstance(p, _ConsumerProxy):
            raise NoSuchProxy(f"no consumer proxy {proxy_id!r}")
        return p

    def _supplier(self, proxy_id: int) -> _SupplierProxy:
        p = self._proxies.get(proxy_id)
        if not isinstance(p, _SupplierProxy):
            raise NoSuchProxy(f"no supplier proxy {proxy_id!r}")
        return p

    def connect_supplier(self, channel_id: int, overrides: QosProfile = QosProfile()) -> int:
        ch = self._channel(channel_id)
        with self._lock:
            pid = next(self._proxy_ids)
            proxy = _SupplierProxy(pid, ch, overrides)
            self._proxies[pid] = proxy
        with ch.lock:
            ch.suppliers[pid] = proxy
        return pid

    def connect_consumer(
        self,
        channel_id: int,
        subscription: Subscription = (),
        filter: Constraint | None = None,
        overrides: QosProfile = QosProfile(),
    ) -> int:
        ch = self._channel(channel_id)
        with self._lock:
            pid = next(self._proxy_ids)
            proxy = _ConsumerProxy(pid, ch, subscription, filter, overrides)
            self._proxies[pid] = proxy
        with ch.lock:
            ch.consumers[pid] = proxy
        return pid

    def is_consumer(self, proxy_id: int) -> bool:
        return isinstance(self._proxies.get(proxy_id), _ConsumerProxy)

    def is_supplier(self, proxy_id: int) -> bool:
        return isinstance(self._proxies.get(proxy_id), _SupplierProxy)

    def consumer_reliability(self, proxy_id: int) -> Reliability:
        return self._consumer(proxy_id).reliability

    def set_filter(self, proxy_id: int, filter: Constraint | None) -> None:
        c = self._consumer(proxy_id)
        with c.channel.lock:
            c.filter = filter

    def set_listener(self, proxy_id: int, listener: Callable[[int], None] | None) -> None:
        c = self._consumer(proxy_id)
        with c.channel.lock:
            c.listener = listener

    def disconnect(self, proxy_id: int) -> ConsumerStats | None:
        """Remove a proxy. For consumers, queued events count as discarded and
        the final counters are returned."""
        with self._lock:
            p = self._proxies.pop(proxy_id, None)
        if p is None:
            raise NoSuchProxy(f"no proxy {proxy_id!r}")
        ch = p.channel
        with ch.lock:
            if isinstance(p, _SupplierProxy):
                ch.suppliers.pop(proxy_id, None)
                return None
            ch.consumers.pop(proxy_id, None)
            p.discarded += len(p.queue) + len(p.in_flight)
            p.queue.clear()
            p.in_flight.clear()
            p.listener = None
            return p.stats()

    # -- data path

    def push(self, supplier_proxy_id: int, e: StructuredEvent) -> PushStatus:
        supplier = self._supplier(supplier_proxy_id)
        violations = validate_event(e)
        if violations:
            raise InvalidEvent(violations)
        ch = supplier.channel
        notify = []
        with ch.lock:
            if supplier_proxy_id not in ch.suppliers:
                raise NoSuchProxy(f"no supplier proxy {supplier_proxy_id!r}")
            now = self._clock()
            header = e.header
            vh = e.variable_header
            targets = []
            for c in ch.consumers.values():
                if c.subscription and not match_subscription(c.subscription, header):
                    continue
                if c.filter is not None and not eval_constraint(c.filter, e):
                    continue
                qos = resolve_qos(ch.default_qos, c.overrides, vh)
                if (
                    qos.reliability is Reliability.RELIABLE
                    and qos.discard_policy is DiscardPolicy.REJECT_NEW
                    and c.is_full(now)
                ):
                    return PushStatus.REJECTED
                targets.append((c, qos))
            for c, qos in targets:
                if c.offer(e, qos, now) and c.listener is not None:
                    notify.append(c)
        for c in notify:
            listener = c.listener
            if listener is not None:
                listener(c.proxy_id)
        return PushStatus.ACCEPTED

    def receive(self, proxy_id: int, max: int) -> list[StructuredEvent]:
        """Dequeue up to ``max`` live events; they count as delivered."""
        c = self._consumer(proxy_id)
        out = []
        with c.channel.lock:
            now = self._clock()
            while len(out) < max:
                entry = c.pop_live(now)
                if entry is None:
                    break
                out.append(entry.event)
            c.delivered += len(out)
        return out

    def take(self, proxy_id: int, max: int) -> list[tuple[int, StructuredEvent]]:
        """Move up to ``max`` live events to the in-flight set.

        Returned pairs carry a per-proxy delivery sequence; :meth:`ack`
        confirms them cumulatively, :meth:`reject` drops one as discarded and
        :meth:`requeue_in_flight` puts the unconfirmed ones back.
        """
        c = self._consumer(proxy_id)
        out = []
        with c.channel.lock:
            now = self._clock()
            while len(out) < max:
                entry = c.pop_live(now)
                if entry is None:
                    break
                seq = c.next_delivery
                c.next_delivery += 1
                c.in_flight[seq] = entry
                out.append((seq, entry.event))
        return out

    def ack(self, proxy_id: int, upto: int) -> int:
        c = self._consumer(proxy_id)
        with c.channel.lock:
            done = [s for s in c.in_flight if s <= upto]
            for s in done:
                del c.in_flight[s]
            c.delivered += len(done)
        return len(done)

    def reject(self, proxy_id: int, seq: int) -> None:
        c = self._consumer(proxy_id)
        with c.channel.lock:
            if c.in_flight.pop(seq, None) is not None:
                c.discarded += 1

    def requeue_in_flight(self, proxy_id: int) -> int:
        """Return unconfirmed in-flight events to the head of the queue, in order."""
        c = self._consumer(proxy_id)
        with c.channel.lock:
            entries = [c.in_flight[s] for s in sorted(c.in_flight)]
            c.in_flight.clear()
            if not entries:
                return 0
            if isinstance(c.queue, deque):
                c.queue.extendleft(reversed(entries))
            else:
                for entry in entries:
                    bisect.insort(c.queue, entry, key=_priority_key)
        listener = c.listener
        if listener is not None:
            listener(proxy_id)
        return len(entries)

    def stats(self, proxy_id: int) -> ConsumerStats:
        c = self._consumer(proxy_id)
        with c.channel.lock:
            return c.stats()

    def consumers_of(self, channel_id: int) -> list[int]:
        ch = self._channel(channel_id)
        with ch.lock:
            return list(ch.consumers)

