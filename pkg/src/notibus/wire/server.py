"""TCP broker hosting every service, and the ``notibusd`` entry point.

Each connection is a session. The first request must be ``Hello`` with the
protocol version; afterwards every request gets exactly one response with
the same ``request_id`` (``<Kind>Ok`` or ``Error``). A session that switches
a consumer proxy to push mode with ``Subscribe`` also receives unsolicited
``Deliver`` messages (``request_id`` 0) in queue order.

A malformed frame closes only the session that sent it.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import signal
import socket
import sys
import threading
from typing import Any, Callable

from ..broker import Broker
from ..channel import DEFAULT_QOS, PushStatus, QosProfile, Reliability
from ..errors import (
    BadRequest,
    DecodeError,
    FrameTooLarge,
    InvalidQos,
    NotibusError,
    ProtocolError,
    ProtocolVersionMismatch,
    UnknownKind,
)
from ..event import event_from_value, event_to_text
from ..filter import as_constraint
from ..naming import ServiceRef
from ..notifylog import LogConfig
from .frame import HEADER, PROTOCOL_VERSION, FrameBuffer, Message, decode_body, encode_frame

log = logging.getLogger(__name__)

DEFAULT_PORT = 4690
DEFAULT_GRACE_MS = 5000
PUMP_BATCH = 256


def deliver_frame(proxy_id: int, seq: int, event_text: str) -> bytes:
    """Deliver frame built by splicing the cached event text; byte-identical to
    ``encode_frame(Message("Deliver", 0, {...}))``."""
    body = (
        '{"args":{"event":' + event_text + ',"proxy_id":' + str(proxy_id) + ',"seq":' + str(seq)
        + '},"kind":"Deliver","request_id":0}'
    ).encode("utf-8")
    return HEADER.pack(len(body)) + body


def _int_arg(args: dict, name: str, default: Any = ...) -> int:
    v = args.get(name, default)
    if v is ...:
        raise BadRequest(f"missing argument {name!r}")
    if v is not None and type(v) is not int:
        raise BadRequest(f"argument {name!r} must be an int")
    return v


def _qos_arg(args: dict) -> QosProfile:
    return QosProfile.from_value(args.get("qos"))


def _subscription_arg(args: dict) -> list[tuple[str, str]]:
    raw = args.get("subscription") or []
    if type(raw) is not list:
        raise BadRequest("subscription must be a list of [domain, type] pairs")
    out = []
    for pair in raw:
        if type(pair) is not list or len(pair) != 2 or not all(type(x) is str for x in pair):
            raise BadRequest("subscription must be a list of [domain, type] pairs")
        out.append((pair[0], pair[1]))
    return out


def _filter_arg(args: dict, name: str = "filter"):
    v = args.get(name)
    if v is not None and type(v) is not str:
        raise BadRequest(f"{name} must be constraint text or null")
    return as_constraint(v)


class _Session:
    _ids = 0

    def __init__(self, writer: asyncio.StreamWriter):
        _Session._ids += 1
        self.id = _Session._ids
        self.writer = writer
        self.hello_done = False
        self.closed = False
        self.subscribed: dict[int, int] = {}  # proxy id -> last best-effort seq
        self.wake = asyncio.Event()
        self.pump_task: asyncio.Task | None = None
        self.out: list[bytes] = []

    def send(self, data: bytes) -> None:
        if not self.closed:
            self.out.append(data)

    def flush(self) -> None:
        # One write per batch of responses keeps syscalls off the per-request path.
        if self.out:
            data = b"".join(self.out)
            self.out.clear()
            if not self.writer.is_closing():
                self.writer.write(data)


class BrokerServer:
    def __init__(
        self,
        broker: Broker,
        host: str = "127.0.0.1",
        port: int = DEFAULT_PORT,
        reconnect_grace_ms: int = DEFAULT_GRACE_MS,
    ):
        self.broker = broker
        self.host = host
        self.port = port
        self.reconnect_grace_ms = reconnect_grace_ms
        self.sessions_closed_on_error = 0
        self._server: asyncio.base_events.Server | None = None
        self._loop: asyncio.AbstractEventLoop | None = None
        self._loop_thread: int | None = None
        self._owner: dict[int, _Session] = {}
        self._orphan_timers: dict[int, asyncio.TimerHandle] = {}
        self._sessions: set[_Session] = set()
        self._handlers: dict[str, Callable[[_Session, dict], dict]] = {
            "Hello": self._hello,
            "CreateChannel": self._create_channel,
            "ConnectSupplier": self._connect_supplier,
            "ConnectConsumer": self._connect_consumer,
            "SetFilter": self._set_filter,
            "Push": self._push,
            "Receive": self._receive,
            "Disconnect": self._disconnect,
            "Subscribe": self._subscribe,
            "Ack": self._ack,
            "Bind": self._bind,
            "Rebind": self._rebind,
            "Resolve": self._resolve,
            "Unbind": self._unbind,
            "List": self._list,
            "BindNewContext": self._bind_new_context,
            "DefineProperty": self._define_property,
            "GetProperty": self._get_property,
            "GetAll": self._get_all,
            "DeleteProperty": self._delete_property,
            "CreateLog": self._create_log,
            "Query": self._query,
        }

    # -- lifecycle

    async def start(self) -> tuple[str, int]:
        self._loop = asyncio.get_running_loop()
        self._loop_thread = threading.get_ident()
        self._server = await asyncio.start_server(self._on_client, self.host, self.port, limit=2**16)
        sockname = self._server.sockets[0].getsockname()
        self.host, self.port = sockname[0], sockname[1]
        return self.host, self.port

    async def serve_forever(self) -> None:
        async with self._server:
            await self._server.serve_forever()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for s in list(self._sessions):
            s.closed = True
            s.writer.close()
        for h in self._orphan_timers.values():
            h.cancel()
        self._orphan_timers.clear()

    # -- sessions

    async def _on_client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        sock = writer.get_extra_info("socket")
        if sock is not None:
            try:
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            except OSError:
                pass
        s = _Session(writer)
        self._sessions.add(s)
        buf = FrameBuffer()
        try:
            while not s.closed:
                data = await reader.read(1 << 16)
                if not data:
                    buf.close()
                    break
                buf.feed(data)
                for body in buf.bodies():
                    self._handle_body(s, body)
                    if s.closed:
                        break
                s.flush()
                if writer.transport.get_write_buffer_size() > 1 << 20:
                    await writer.drain()
        except (DecodeError, FrameTooLarge) as e:
            self.sessions_closed_on_error += 1
            log.info("session %d: closing on malformed input: %s", s.id, e)
            self._send_error(s, 0, e)
        except (ConnectionError, OSError) as e:
            log.debug("session %d: connection error %s", s.id, e)
        except Exception:  # never let one session take the broker down
            self.sessions_closed_on_error += 1
            log.exception("session %d: unexpected failure", s.id)
        finally:
            await self._teardown(s)

    async def _teardown(self, s: _Session) -> None:
        s.flush()
        s.closed = True
        self._sessions.discard(s)
        if s.pump_task is not None:
            s.pump_task.cancel()
        channels = self.broker.channels
        for pid in list(s.subscribed):
            try:
                channels.set_listener(pid, None)
                if channels.consumer_reliability(pid) is Reliability.RELIABLE:
                    channels.requeue_in_flight(pid)
            except NotibusError:
                pass
        for pid, owner in list(self._owner.items()):
            if owner is s:
                del self._owner[pid]
                self._orphan_timers[pid] = self._loop.call_later(
                    self.reconnect_grace_ms / 1000, self._expire_orphan, pid
                )
        try:
            s.writer.close()
            await s.writer.wait_closed()
        except (ConnectionError, OSError):
            pass

    def _expire_orphan(self, pid: int) -> None:
        if self._orphan_timers.pop(pid, None) is None or pid in self._owner:
            return
        try:
            self.broker.channels.disconnect(pid)
            log.info("proxy %d disconnected after reconnect grace", pid)
        except NotibusError:
            pass

    def _own(self, s: _Session, pid: int) -> None:
        timer = self._orphan_timers.pop(pid, None)
        if timer is not None:
            timer.cancel()
        prev = self._owner.get(pid)
        if prev is not None and prev is not s:
            prev.subscribed.pop(pid, None)
        self._owner[pid] = s

    # -- dispatch

    def _handle_body(self, s: _Session, body: bytes) -> None:
        msg = decode_body(body)
        if not s.hello_done and msg.kind != "Hello":
            self._send_error(s, msg.request_id, ProtocolError("session must start with Hello"))
            s.closed = True
            return
        handler = self._handlers.get(msg.kind)
        try:
            if handler is None:
                raise UnknownKind(f"unknown message kind {msg.kind!r}")
            result = handler(s, msg.args)
        except NotibusError as e:
            self._send_error(s, msg.request_id, e)
            return
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            self._send_error(s, msg.request_id, BadRequest(f"{type(e).__name__}: {e}"))
            return
        s.send(encode_frame(Message(msg.kind + "Ok", msg.request_id, result)))

    def _send_error(self, s: _Session, request_id: int, e: NotibusError) -> None:
        s.send(encode_frame(Message("Error", request_id, {"code": e.code, "message": str(e)})))

    # -- handlers

    def _hello(self, s: _Session, args: dict) -> dict:
        version = args.get("version")
        if version != PROTOCOL_VERSION or type(version) is not int:
            raise ProtocolVersionMismatch(f"broker speaks version {PROTOCOL_VERSION}, client sent {version!r}")
        s.hello_done = True
        return {"version": PROTOCOL_VERSION}

    def _create_channel(self, s: _Session, args: dict) -> dict:
        qos = DEFAULT_QOS if args.get("qos") is None else _qos_arg(args)
        if not qos.is_complete():
            raise InvalidQos("channel qos must set every field")
        return {"channel_id": self.broker.channels.create_channel(qos)}

    def _connect_supplier(self, s: _Session, args: dict) -> dict:
        pid = self.broker.channels.connect_supplier(_int_arg(args, "channel_id"), _qos_arg(args))
        self._own(s, pid)
        return {"proxy_id": pid}

    def _connect_consumer(self, s: _Session, args: dict) -> dict:
        pid = self.broker.channels.connect_consumer(
            _int_arg(args, "channel_id"), _subscription_arg(args), _filter_arg(args), _qos_arg(args)
        )
        self._own(s, pid)
        return {"proxy_id": pid}

    def _set_filter(self, s: _Session, args: dict) -> dict:
        self.broker.channels.set_filter(_int_arg(args, "proxy_id"), _filter_arg(args))
        return {}

    def _push(self, s: _Session, args: dict) -> dict:
        pid = _int_arg(args, "proxy_id")
        event = event_from_value(args["event"])
        if self._owner.get(pid) is not s and self.broker.channels.is_supplier(pid):
            self._own(s, pid)
        status = self.broker.channels.push(pid, event)
        if status is PushStatus.REJECTED:
            return {"reason": "QueueFull", "status": status.value}
        return {"status": status.value}

    def _receive(self, s: _Session, args: dict) -> dict:
        events = self.broker.channels.receive(_int_arg(args, "proxy_id"), _int_arg(args, "max", 1))
        return {"events": [e.to_value() for e in events]}

    def _disconnect(self, s: _Session, args: dict) -> dict:
        pid = _int_arg(args, "proxy_id")
        if pid in s.subscribed:
            self.broker.channels.set_listener(pid, None)
            s.subscribed.pop(pid, None)
        stats = self.broker.channels.disconnect(pid)
        self._owner.pop(pid, None)
        timer = self._orphan_timers.pop(pid, None)
        if timer is not None:
            timer.cancel()
        return {} if stats is None else {"stats": stats.to_value()}

    def _subscribe(self, s: _Session, args: dict) -> dict:
        pid = _int_arg(args, "proxy_id")
        channels = self.broker.channels
        reliable = channels.consumer_reliability(pid) is Reliability.RELIABLE
        prev = self._owner.get(pid)
        if reliable and prev is not None and prev is not s and pid in prev.subscribed:
            channels.requeue_in_flight(pid)
        self._own(s, pid)
        s.subscribed[pid] = 0
        channels.set_listener(pid, self._make_listener(s))
        if s.pump_task is None:
            s.pump_task = asyncio.get_running_loop().create_task(self._pump(s))
        s.wake.set()
        return {}

    def _ack(self, s: _Session, args: dict) -> dict:
        return {"acked": self.broker.channels.ack(_int_arg(args, "proxy_id"), _int_arg(args, "seq"))}

    def _bind(self, s: _Session, args: dict) -> dict:
        self.broker.naming.bind(args["name"], ServiceRef.from_value(args["ref"]))
        return {}

    def _rebind(self, s: _Session, args: dict) -> dict:
        self.broker.naming.rebind(args["name"], ServiceRef.from_value(args["ref"]))
        return {}

    def _resolve(self, s: _Session, args: dict) -> dict:
        return {"ref": self.broker.naming.resolve(args["name"]).to_value()}

    def _unbind(self, s: _Session, args: dict) -> dict:
        self.broker.naming.unbind(args["name"])
        return {}

    def _list(self, s: _Session, args: dict) -> dict:
        items = self.broker.naming.list(args.get("name"))
        return {"bindings": [[comp, kind.value] for comp, kind in items]}

    def _bind_new_context(self, s: _Session, args: dict) -> dict:
        self.broker.naming.bind_new_context(args["name"])
        return {}

    def _define_property(self, s: _Session, args: dict) -> dict:
        self.broker.properties.define_property(args["set_id"], args["name"], args["value"])
        return {}

    def _get_property(self, s: _Session, args: dict) -> dict:
        return {"value": self.broker.properties.get_property(args["set_id"], args["name"])}

    def _get_all(self, s: _Session, args: dict) -> dict:
        return {"entries": self.broker.properties.get_all(args["set_id"])}

    def _delete_property(self, s: _Session, args: dict) -> dict:
        self.broker.properties.delete_property(args["set_id"], args["name"])
        return {}

    def _create_log(self, s: _Session, args: dict) -> dict:
        self.broker.logs.create_log(LogConfig.from_value(args))
        return {}

    def _query(self, s: _Session, args: dict) -> dict:
        records, next_id = self.broker.logs.query(
            args["log_id"],
            _filter_arg(args, "constraint"),
            _int_arg(args, "from_id", 1),
            _int_arg(args, "max", None),
        )
        return {"next_id": next_id, "records": [r.to_value() for r in records]}

    # -- push-mode delivery

    def _make_listener(self, s: _Session) -> Callable[[int], None]:
        def wake(_pid: int) -> None:
            if threading.get_ident() == self._loop_thread:
                s.wake.set()
            else:
                self._loop.call_soon_threadsafe(s.wake.set)

        return wake

    async def _pump(self, s: _Session) -> None:
        channels = self.broker.channels
        try:
            while not s.closed:
                await s.wake.wait()
                s.wake.clear()
                progressed = True
                while progressed and not s.closed:
                    progressed = False
                    for pid in list(s.subscribed):
                        try:
                            if channels.consumer_reliability(pid) is Reliability.RELIABLE:
                                items = channels.take(pid, PUMP_BATCH)
                            else:
                                events = channels.receive(pid, PUMP_BATCH)
                                first = s.subscribed.get(pid, 0) + 1
                                items = list(enumerate(events, first))
                                if items:
                                    s.subscribed[pid] = items[-1][0]
                        except NotibusError:
                            s.subscribed.pop(pid, None)
                            continue
                        if items:
                            progressed = True
                            s.send(b"".join(deliver_frame(pid, seq, event_to_text(e)) for seq, e in items))
                            s.flush()
                    await s.writer.drain()
        except asyncio.CancelledError:
            pass
        except (ConnectionError, OSError):
            s.closed = True


class ServerThread:
    """Run a :class:`BrokerServer` on a private event loop in a daemon thread."""

    def __init__(self, broker: Broker | None = None, host: str = "127.0.0.1", port: int = 0, **kwargs):
        self.broker = broker if broker is not None else Broker()
        self.server = BrokerServer(self.broker, host, port, **kwargs)
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._run, name="notibus-broker", daemon=True)
        self._started = threading.Event()
        self._error: BaseException | None = None

    def _run(self) -> None:
        asyncio.set_event_loop(self._loop)
        try:
            self._loop.run_until_complete(self.server.start())
        except BaseException as e:
            self._error = e
            self._started.set()
            return
        self._started.set()
        self._loop.run_forever()
        self._loop.run_until_complete(self.server.stop())
        pending = asyncio.all_tasks(self._loop)
        for t in pending:
            t.cancel()
        self._loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
        self._loop.close()

    def start(self) -> tuple[str, int]:
        self._thread.start()
        self._started.wait()
        if self._error is not None:
            raise self._error
        return self.server.host, self.server.port

    @property
    def address(self) -> tuple[str, int]:
        return self.server.host, self.server.port

    def stop(self) -> None:
        if self._thread.is_alive():
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(timeout=10)
        self.broker.close()

    def __enter__(self) -> "ServerThread":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def parse_address(text: str, default_port: int = DEFAULT_PORT) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, default_port
    return host or "127.0.0.1", int(port)


async def _serve(args) -> int:
    data_dir = args.data_dir or os.environ.get("NOTIBUS_DATA_DIR")
    if not data_dir:
        print("notibusd: --data-dir or NOTIBUS_DATA_DIR is required", file=sys.stderr)
        return 2
    try:
        os.makedirs(data_dir, exist_ok=True)
        broker = Broker(data_dir, fsync=not args.no_fsync)
    except OSError as e:
        print(f"notibusd: cannot use data dir {data_dir}: {e}", file=sys.stderr)
        return 1
    host, port = parse_address(args.listen)
    server = BrokerServer(broker, host, port, reconnect_grace_ms=args.reconnect_grace_ms)
    try:
        await server.start()
    except OSError as e:
        print(f"notibusd: cannot listen on {host}:{port}: {e}", file=sys.stderr)
        return 1
    print(f"notibusd listening on {server.host}:{server.port}", file=sys.stderr, flush=True)
    loop = asyncio.get_running_loop()
    stop = asyncio.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError):
            pass
    serve = loop.create_task(server.serve_forever())
    await stop.wait()
    serve.cancel()
    await server.stop()
    broker.close()
    return 0


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="notibusd", description="notibus broker")
    p.add_argument("--listen", default=f"127.0.0.1:{DEFAULT_PORT}", help="HOST:PORT (port 0 picks a free one)")
    p.add_argument("--data-dir", help="state directory (default: $NOTIBUS_DATA_DIR)")
    p.add_argument("--log-level", default="info", choices=["error", "warn", "info", "debug"])
    p.add_argument("--reconnect-grace-ms", type=int, default=DEFAULT_GRACE_MS)
    p.add_argument("--no-fsync", action="store_true", help="skip fsync on log appends and property writes")
    args = p.parse_args(argv)
    level = {"warn": "WARNING"}.get(args.log_level, args.log_level.upper())
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return asyncio.run(_serve(args))
    except KeyboardInterrupt:
        return 0


if __name__ == "__main__":
    sys.exit(main())
