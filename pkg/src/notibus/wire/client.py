"""Blocking client for the notibus broker.

One :class:`Session` is one TCP connection. Requests may be issued from
several threads at once; a reader thread matches responses to requests by
``request_id`` and routes ``Deliver`` messages to the :class:`EventStream`
of their consumer proxy.
"""

from __future__ import annotations

import itertools
import queue
import select
import socket
import threading
from concurrent.futures import Future
from typing import Any, Callable, Iterable

from ..channel import ConsumerStats, PushStatus, QosProfile
from ..codec import Value
from ..errors import BrokerUnreachable, error_from_code
from ..event import StructuredEvent, event_from_value
from ..filter import Constraint, print_constraint
from ..naming import BindingKind, NameLike, ServiceRef, format_name, parse_name
from ..notifylog import LogConfig, LogRecord
from .frame import PROTOCOL_VERSION, FrameBuffer, Message, decode_body, encode_frame
from .server import DEFAULT_PORT

ACK_IDLE_S = 0.002  # callback streams acknowledge after this much silence


def _name_arg(n: NameLike) -> str:
    return format_name(parse_name(n))


def _filter_text(f: Constraint | str | None) -> str | None:
    if f is None or isinstance(f, str):
        return f
    return print_constraint(f)


class EventStream:
    """Events pushed to one consumer proxy.

    Consumed events are acknowledged cumulatively: after every ``ack_every``
    events, or whenever the local buffer runs dry. With a ``handler`` the
    events are not buffered; the handler is called as ``handler(seq, event)``
    on the session's reader thread. ``raw`` skips building
    :class:`StructuredEvent` and passes the decoded event value instead.
    """

    def __init__(
        self,
        session: "Session",
        proxy_id: int,
        ack_every: int = 64,
        handler: Callable[[int, Any], None] | None = None,
        raw: bool = False,
    ):
        self.session = session
        self.proxy_id = proxy_id
        self.ack_every = ack_every
        self.handler = handler
        self.raw = raw
        self._q: queue.SimpleQueue = queue.SimpleQueue()
        self._last_seq = 0
        self._unacked = 0

    def _put(self, seq: int, event_value: Value) -> None:
        event = event_value if self.raw else event_from_value(event_value)
        if self.handler is None:
            self._q.put((seq, event))
            return
        # Callback mode runs on the reader thread, which also flushes acks
        # once the connection goes idle.
        self.handler(seq, event)
        self._last_seq = seq
        self._unacked += 1
        if self._unacked >= self.ack_every:
            self.ack()

    def get(self, timeout: float | None = None, block: bool = True) -> StructuredEvent:
        """Next event; raises :class:`queue.Empty` on timeout."""
        seq, event = self._q.get(block, timeout)
        self._last_seq = seq
        self._unacked += 1
        if self._unacked >= self.ack_every or self._q.empty():
            self.ack()
        return event

    def get_nowait(self) -> StructuredEvent:
        return self.get(block=False)

    def ack(self) -> None:
        if self._unacked and not self.session.closed:
            self._unacked = 0
            self.session.request_async("Ack", {"proxy_id": self.proxy_id, "seq": self._last_seq})

    def pending(self) -> int:
        return self._q.qsize()


class Session:
    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, timeout: float = 30.0, connect_timeout: float = 5.0):
        self.timeout = timeout
        try:
            self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as e:
            raise BrokerUnreachable(f"cannot reach broker at {host}:{port}: {e}") from None
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock.settimeout(None)
        self._send_lock = threading.Lock()
        self._pending: dict[int, Future] = {}
        self._pending_lock = threading.Lock()
        self._ids = itertools.count(1)
        self._streams: dict[int, EventStream] = {}
        self._callback_streams: tuple[EventStream, ...] = ()
        self.frames_received = 0
        self.closed = False
        self.close_reason: BaseException | None = None
        self._reader = threading.Thread(target=self._read_loop, name="notibus-client-reader", daemon=True)
        self._reader.start()
        self.request("Hello", {"version": PROTOCOL_VERSION})

    # -- transport

    def _read_loop(self) -> None:
        buf = FrameBuffer()
        sock = self._sock
        try:
            while True:
                if any(st._unacked for st in self._callback_streams):
                    ready, _, _ = select.select([sock], [], [], ACK_IDLE_S)
                    if not ready:
                        for stream in self._callback_streams:
                            stream.ack()
                        continue
                data = sock.recv(1 << 16)
                if not data:
                    buf.close()
                    break
                buf.feed(data)
                for body in buf.bodies():
                    self.frames_received += 1
                    self._dispatch(decode_body(body))
        except BaseException as e:  # reader must always release waiters
            self.close_reason = e
        finally:
            self.closed = True
            err = BrokerUnreachable("connection to broker closed")
            with self._pending_lock:
                pending, self._pending = self._pending, {}
            for fut in pending.values():
                if not fut.done():
                    fut.set_exception(err)

    def _dispatch(self, msg: Message) -> None:
        if msg.request_id == 0:
            if msg.kind == "Deliver":
                a = msg.args
                stream = self._streams.get(a["proxy_id"])
                if stream is not None:
                    stream._put(a["seq"], a["event"])
            return
        with self._pending_lock:
            fut = self._pending.pop(msg.request_id, None)
        if fut is not None:
            fut.set_result(msg)

    def send_raw(self, data: bytes) -> None:
        with self._send_lock:
            self._sock.sendall(data)

    def request_async(self, kind: str, args: dict | None = None) -> Future:
        rid = next(self._ids)
        fut: Future = Future()
        with self._pending_lock:
            if self.closed:
                fut.set_exception(BrokerUnreachable("session closed"))
                return fut
            self._pending[rid] = fut
        try:
            self.send_raw(encode_frame(Message(kind, rid, args or {})))
        except OSError as e:
            with self._pending_lock:
                self._pending.pop(rid, None)
            fut.set_exception(BrokerUnreachable(str(e)))
        return fut

    @staticmethod
    def result(fut: Future, timeout: float | None = None) -> dict:
        msg: Message = fut.result(timeout)
        if msg.kind == "Error":
            raise error_from_code(msg.args.get("code", ""), msg.args.get("message", ""))
        return msg.args

    def request(self, kind: str, args: dict | None = None) -> dict:
        """Send one request and wait for its response args; broker errors are re-raised."""
        return self.result(self.request_async(kind, args), self.timeout)

    def close(self) -> None:
        self.closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._reader.join(timeout=5)

    def abort(self) -> None:
        """Drop the connection without a clean shutdown (RST), as a crash would."""
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, b"\x01\x00\x00\x00\x00\x00\x00\x00")
        self.close()

    def __enter__(self) -> "Session":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- channels

    def create_channel(self, qos: QosProfile | None = None) -> int:
        args = {} if qos is None else {"qos": qos.to_value()}
        return self.request("CreateChannel", args)["channel_id"]

    def connect_supplier(self, channel_id: int, qos: QosProfile | None = None) -> int:
        args: dict = {"channel_id": channel_id}
        if qos is not None:
            args["qos"] = qos.to_value()
        return self.request("ConnectSupplier", args)["proxy_id"]

    def connect_consumer(
        self,
        channel_id: int,
        subscription: Iterable[tuple[str, str]] = (),
        filter: Constraint | str | None = None,
        qos: QosProfile | None = None,
    ) -> int:
        args: dict = {
            "channel_id": channel_id,
            "subscription": [list(p) for p in subscription],
            "filter": _filter_text(filter),
        }
        if qos is not None:
            args["qos"] = qos.to_value()
        return self.request("ConnectConsumer", args)["proxy_id"]

    def set_filter(self, proxy_id: int, filter: Constraint | str | None) -> None:
        self.request("SetFilter", {"proxy_id": proxy_id, "filter": _filter_text(filter)})

    def push_async(self, proxy_id: int, event: StructuredEvent) -> Future:
        return self.request_async("Push", {"proxy_id": proxy_id, "event": event.to_value()})

    def push(self, proxy_id: int, event: StructuredEvent) -> PushStatus:
        return PushStatus(self.request("Push", {"proxy_id": proxy_id, "event": event.to_value()})["status"])

    def receive(self, proxy_id: int, max: int) -> list[StructuredEvent]:
        events = self.request("Receive", {"proxy_id": proxy_id, "max": max})["events"]
        return [event_from_value(e) for e in events]

    def subscribe(
        self,
        proxy_id: int,
        ack_every: int = 64,
        handler: Callable[[int, Any], None] | None = None,
        raw: bool = False,
    ) -> EventStream:
        """Switch a consumer proxy to push mode on this session."""
        stream = self._streams.get(proxy_id)
        if stream is None:
            stream = EventStream(self, proxy_id, ack_every, handler, raw)
            self._streams[proxy_id] = stream
            if handler is not None:
                self._callback_streams += (stream,)
        self.request("Subscribe", {"proxy_id": proxy_id})
        return stream

    def disconnect(self, proxy_id: int) -> ConsumerStats | None:
        """Disconnect a proxy; consumers report their final counters.

        Events this session already consumed are acknowledged first, so only
        events still unseen count as discarded.
        """
        stream = self._streams.pop(proxy_id, None)
        if stream is not None:
            stream.ack()
            self._callback_streams = tuple(st for st in self._callback_streams if st is not stream)
        res = self.request("Disconnect", {"proxy_id": proxy_id})
        stats = res.get("stats")
        return None if stats is None else ConsumerStats(**stats)

    # -- naming

    def bind(self, name: NameLike, ref: ServiceRef) -> None:
        self.request("Bind", {"name": _name_arg(name), "ref": ref.to_value()})

    def rebind(self, name: NameLike, ref: ServiceRef) -> None:
        self.request("Rebind", {"name": _name_arg(name), "ref": ref.to_value()})

    def resolve(self, name: NameLike) -> ServiceRef:
        return ServiceRef.from_value(self.request("Resolve", {"name": _name_arg(name)})["ref"])

    def unbind(self, name: NameLike) -> None:
        self.request("Unbind", {"name": _name_arg(name)})

    def list(self, name: NameLike | None = None) -> list[tuple[str, BindingKind]]:
        args = {} if name is None else {"name": _name_arg(name)}
        return [(c, BindingKind(k)) for c, k in self.request("List", args)["bindings"]]

    def bind_new_context(self, name: NameLike) -> None:
        self.request("BindNewContext", {"name": _name_arg(name)})

    # -- properties

    def define_property(self, set_id: str, name: str, value: Value) -> None:
        self.request("DefineProperty", {"set_id": set_id, "name": name, "value": value})

    def get_property(self, set_id: str, name: str) -> Value:
        return self.request("GetProperty", {"set_id": set_id, "name": name})["value"]

    def get_all(self, set_id: str) -> dict[str, Value]:
        return self.request("GetAll", {"set_id": set_id})["entries"]

    def delete_property(self, set_id: str, name: str) -> None:
        self.request("DeleteProperty", {"set_id": set_id, "name": name})

    # -- logs

    def create_log(self, cfg: LogConfig) -> None:
        self.request("CreateLog", cfg.to_value())

    def query(
        self, log_id: str, constraint: Constraint | str | None = None, from_id: int = 1, max: int | None = None
    ) -> tuple[list[LogRecord], int | None]:
        args: dict[str, Any] = {"log_id": log_id, "constraint": _filter_text(constraint), "from_id": from_id, "max": max}
        res = self.request("Query", args)
        return [LogRecord.from_value(r) for r in res["records"]], res["next_id"]
