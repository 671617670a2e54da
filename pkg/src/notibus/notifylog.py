"""Persistent event logs fed by a channel consumer.

On-disk layout per log::

    <data-dir>/logs/<log_id>/config         canonical encoding of the LogConfig
    <data-dir>/logs/<log_id>/segment-<n>    frames of canonical LogRecord maps

Segment ``n`` holds ids ``n*S+1 .. (n+1)*S`` for the log's fixed segment size
``S``. Frames use the wire framing (4-byte big-endian length, then body).
Startup scans the segments in order and truncates at the first torn or
undecodable frame, so what survives a crash is always a prefix of what was
appended. Wrap mode keeps the newest ``max_records`` records visible and
deletes a segment once every id in it has fallen out of that window.
"""

from __future__ import annotations

import enum
import logging
import os
import re
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from itertools import islice
from pathlib import Path
from typing import Callable

from . import codec
from .channel import ChannelService, PushStatus, QosProfile
from .errors import (
    DecodeError,
    DuplicateLog,
    InvalidEvent,
    InvalidLogConfig,
    LogFull,
    NoSuchChannel,
    NoSuchLog,
    NotibusError,
)
from .event import StructuredEvent, event_from_value, make_event
from .filter import Constraint, as_constraint, eval_constraint, print_constraint

log = logging.getLogger(__name__)

_LEN = struct.Struct(">I")
_SEGMENT_RE = re.compile(r"segment-(\d+)")
DEFAULT_SEGMENT_RECORDS = 1024


class FullAction(str, enum.Enum):
    HALT = "Halt"
    WRAP = "Wrap"


@dataclass(frozen=True)
class LogConfig:
    log_id: str
    source_channel: int
    capture_filter: Constraint | None = None
    max_records: int = 10_000
    full_action: FullAction = FullAction.HALT
    threshold_fractions: tuple[float, ...] = ()
    alarm_channel: int | None = None

    def __post_init__(self):
        lid = self.log_id
        if type(lid) is not str or lid in ("", ".", "..") or "/" in lid or "\0" in lid:
            raise InvalidLogConfig(f"bad log id {lid!r}")
        if type(self.max_records) is not int or self.max_records < 1:
            raise InvalidLogConfig("max_records must be an int >= 1")
        try:
            object.__setattr__(self, "full_action", FullAction(self.full_action))
        except ValueError:
            raise InvalidLogConfig(f"bad full_action {self.full_action!r}") from None
        fr = tuple(self.threshold_fractions)
        for f in fr:
            if type(f) not in (int, float) or not 0 < f <= 1:
                raise InvalidLogConfig(f"threshold fraction {f!r} outside (0, 1]")
        if any(a >= b for a, b in zip(fr, fr[1:])):
            raise InvalidLogConfig("threshold fractions must be ascending and unique")
        object.__setattr__(self, "threshold_fractions", tuple(float(f) for f in fr))
        object.__setattr__(self, "capture_filter", as_constraint(self.capture_filter))

    def to_value(self) -> dict:
        return {
            "log_id": self.log_id,
            "source_channel": self.source_channel,
            "capture_filter": None if self.capture_filter is None else print_constraint(self.capture_filter),
            "max_records": self.max_records,
            "full_action": self.full_action.value,
            "threshold_fractions": list(self.threshold_fractions),
            "alarm_channel": self.alarm_channel,
        }

    @classmethod
    def from_value(cls, v: dict) -> "LogConfig":
        try:
            return cls(
                log_id=v["log_id"],
                source_channel=v["source_channel"],
                capture_filter=v.get("capture_filter"),
                max_records=v.get("max_records", 10_000),
                full_action=v.get("full_action", "Halt"),
                threshold_fractions=tuple(v.get("threshold_fractions", ())),
                alarm_channel=v.get("alarm_channel"),
            )
        except (KeyError, TypeError) as e:
            raise InvalidLogConfig(f"malformed log config: {e}") from None


@dataclass(frozen=True)
class LogRecord:
    id: int
    timestamp_ns: int
    event: StructuredEvent

    def to_value(self) -> dict:
        return {"event": self.event.to_value(), "id": self.id, "timestamp_ns": self.timestamp_ns}

    @classmethod
    def from_value(cls, v) -> "LogRecord":
        if type(v) is not dict or v.keys() != {"event", "id", "timestamp_ns"}:
            raise DecodeError(0, "not a log record")
        if type(v["id"]) is not int or type(v["timestamp_ns"]) is not int:
            raise DecodeError(0, "bad log record id or timestamp")
        return cls(v["id"], v["timestamp_ns"], event_from_value(v["event"]))


def encode_record(r: LogRecord) -> bytes:
    body = codec.encode_value(r.to_value())
    return _LEN.pack(len(body)) + body


def scan_segment(data: bytes, first_id: int) -> tuple[list[LogRecord], int]:
    """Decode consecutive records starting at ``first_id``.

    Returns the records and the byte offset where valid data ends; anything
    after that offset is a torn or corrupt tail.
    """
    records = []
    pos = 0
    expected = first_id
    n = len(data)
    while pos + 4 <= n:
        (length,) = _LEN.unpack_from(data, pos)
        end = pos + 4 + length
        if end > n:
            break
        try:
            r = LogRecord.from_value(codec.decode_value(data[pos + 4 : end]))
        except (DecodeError, InvalidEvent):
            break
        if r.id != expected:
            break
        records.append(r)
        expected += 1
        pos = end
    return records, pos


@dataclass
class _Attachment:
    consumer_proxy: int
    alarm_proxy: int | None


class Log:
    """One log's storage, window and threshold state."""

    def __init__(self, cfg: LogConfig, directory: Path | None, segment_records: int, fsync: bool, clock: Callable[[], int]):
        self.cfg = cfg
        self.directory = directory
        self.segment_records = segment_records
        self.fsync = fsync
        self.clock = clock
        self.records: deque[LogRecord] = deque()
        self.last_id = 0
        self.alarms_sent = 0
        self.alarm_failures = 0
        self.discarded_full = 0
        self.attachment: _Attachment | None = None
        self.lock = threading.Lock()
        self._fd: int | None = None
        self._fd_segment = -1
        self._drain_lock = threading.Lock()
        self._pending = False
        self._alarm_push: Callable[[StructuredEvent], None] | None = None

    # -- storage

    def _segment_path(self, n: int) -> Path:
        return self.directory / f"segment-{n}"

    def _segments(self) -> list[int]:
        out = []
        for p in self.directory.iterdir():
            m = _SEGMENT_RE.fullmatch(p.name)
            if m:
                out.append(int(m.group(1)))
        return sorted(out)

    def recover(self) -> None:
        """Rebuild the window from disk, truncating any torn tail."""
        segments = self._segments()
        records: list[LogRecord] = []
        expected_seg = segments[0] if segments else 0
        broken = False
        for n in segments:
            path = self._segment_path(n)
            if broken or n != expected_seg:
                broken = True
                path.unlink()
                continue
            data = path.read_bytes()
            recs, good = scan_segment(data, n * self.segment_records + 1)
            if records and recs and recs[0].id != records[-1].id + 1:
                recs, good = [], 0
            records.extend(recs)
            if good < len(data):
                log.warning("log %s: truncating %s at byte %d of %d", self.cfg.log_id, path.name, good, len(data))
                with open(path, "r+b") as f:
                    f.truncate(good)
                    os.fsync(f.fileno())
                broken = True
            elif len(recs) < self.segment_records:
                # a short segment must be the newest one
                broken = True
            expected_seg = n + 1
        self.last_id = records[-1].id if records else (segments[0] * self.segment_records if segments else 0)
        keep = self.cfg.max_records
        self.records = deque(records[-keep:] if len(records) > keep else records)

    def _write(self, r: LogRecord) -> None:
        if self.directory is None:
            return
        seg = (r.id - 1) // self.segment_records
        if seg != self._fd_segment:
            if self._fd is not None:
                os.close(self._fd)
            self._fd = os.open(self._segment_path(seg), os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            self._fd_segment = seg
        os.write(self._fd, encode_record(r))
        if self.fsync:
            os.fsync(self._fd)

    def _drop_dead_segments(self) -> None:
        if self.directory is None or not self.records:
            return
        first_live = self.records[0].id
        dead_upto = (first_live - 1) // self.segment_records  # segments below this index are dead
        for n in self._segments():
            if n >= dead_upto:
                break
            self._segment_path(n).unlink(missing_ok=True)

    def close(self) -> None:
        with self.lock:
            if self._fd is not None:
                os.close(self._fd)
                self._fd = None
                self._fd_segment = -1

    # -- append path

    def append(self, e: StructuredEvent) -> LogRecord:
        with self.lock:
            count_before = len(self.records)
            if count_before >= self.cfg.max_records and self.cfg.full_action is FullAction.HALT:
                raise LogFull(self.cfg.log_id)
            r = LogRecord(self.last_id + 1, self.clock(), e)
            self._write(r)
            self.last_id = r.id
            self.records.append(r)
            if len(self.records) > self.cfg.max_records:
                self.records.popleft()
                if (self.records[0].id - 1) % self.segment_records == 0:
                    self._drop_dead_segments()
            crossed = self._crossed(count_before, len(self.records))
        for f, count in crossed:
            self._send_alarm(f, count)
        return r

    def _crossed(self, before: int, after: int) -> list[tuple[float, int]]:
        out = []
        if after <= before:
            return out
        for f in self.cfg.threshold_fractions:
            # the shortest decimal form, so 0.9 means exactly 9/10 rather than its binary neighbour
            level = Fraction(repr(f)) * self.cfg.max_records
            if before < level <= after:
                out.append((f, after))
        return out

    def _send_alarm(self, fraction: float, count: int) -> None:
        if self._alarm_push is None:
            return
        alarm = make_event("log", "threshold", self.cfg.log_id, body={"fraction": fraction, "records": count})
        try:
            self._alarm_push(alarm)
            self.alarms_sent += 1
        except NotibusError as e:
            self.alarm_failures += 1
            log.warning("log %s: alarm push failed: %s", self.cfg.log_id, e)

    # -- queries

    def query(self, c: Constraint | None, from_id: int = 1, max: int | None = None) -> tuple[list[LogRecord], int | None]:
        if max is not None and max <= 0:
            return [], from_id
        with self.lock:
            records = self.records
            if not records or from_id > records[-1].id:
                return [], None
            start = from_id - records[0].id
            snapshot = list(islice(records, start if start > 0 else 0, None))
        out = []
        for r in snapshot:
            if c is None or eval_constraint(c, r.event):
                out.append(r)
                if max is not None and len(out) >= max:
                    nxt = r.id + 1
                    return out, (nxt if nxt <= snapshot[-1].id else None)
        return out, None


class LogService:
    """All logs hosted by one broker."""

    def __init__(
        self,
        channels: ChannelService,
        data_dir: str | os.PathLike | None = None,
        fsync: bool = True,
        clock: Callable[[], int] = time.time_ns,
        segment_records: int = DEFAULT_SEGMENT_RECORDS,
    ):
        self._channels = channels
        self._fsync = fsync
        self._clock = clock
        self._segment_records = segment_records
        self._logs: dict[str, Log] = {}
        self._lock = threading.Lock()
        self._dir = Path(data_dir) / "logs" if data_dir is not None else None
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
            self._restore()

    def _restore(self) -> None:
        for d in sorted(self._dir.iterdir()):
            cfg_path = d / "config"
            if not cfg_path.is_file():
                continue
            try:
                v = codec.decode_value(cfg_path.read_bytes())
                cfg = LogConfig.from_value(v)
                seg = v.get("segment_records", self._segment_records)
            except (NotibusError, OSError, AttributeError) as e:
                log.error("skipping log %s: %s", d.name, e)
                continue
            lg = Log(cfg, d, seg, self._fsync, self._clock)
            lg.recover()
            self._logs[cfg.log_id] = lg
            log.info("restored log %s with %d records (detached)", cfg.log_id, len(lg.records))

    def create_log(self, cfg: LogConfig) -> None:
        """Create a log, or re-attach a restored detached log of the same id."""
        ch = self._channels
        if not ch.has_channel(cfg.source_channel):
            raise NoSuchChannel(f"no channel {cfg.source_channel!r}")
        if cfg.alarm_channel is not None and not ch.has_channel(cfg.alarm_channel):
            raise NoSuchChannel(f"no channel {cfg.alarm_channel!r}")
        with self._lock:
            lg = self._logs.get(cfg.log_id)
            if lg is not None and lg.attachment is not None:
                raise DuplicateLog(cfg.log_id)
            if lg is None:
                directory = None
                seg = min(self._segment_records, cfg.max_records)
                if self._dir is not None:
                    directory = self._dir / cfg.log_id
                    directory.mkdir(exist_ok=True)
                lg = Log(cfg, directory, seg, self._fsync, self._clock)
                if directory is not None:
                    lg.recover()
            else:
                lg.cfg = cfg
            if lg.directory is not None:
                v = cfg.to_value()
                v["segment_records"] = lg.segment_records
                _atomic_write(lg.directory / "config", codec.encode_value(v), self._fsync)
            self._logs[cfg.log_id] = lg
            alarm_proxy = None
            if cfg.alarm_channel is not None:
                alarm_proxy = ch.connect_supplier(cfg.alarm_channel)
                lg._alarm_push = lambda e, p=alarm_proxy: self._push_alarm(p, e)
            proxy = ch.connect_consumer(cfg.source_channel, (), cfg.capture_filter, QosProfile())
            lg.attachment = _Attachment(proxy, alarm_proxy)
        ch.set_listener(proxy, lambda pid, lg=lg: self._drain(lg, pid))

    def _push_alarm(self, proxy: int, e: StructuredEvent) -> None:
        if self._channels.push(proxy, e) is PushStatus.REJECTED:
            raise LogFull("alarm channel rejected the alarm")

    def _drain(self, lg: Log, proxy: int) -> None:
        lg._pending = True
        while lg._pending:
            if not lg._drain_lock.acquire(blocking=False):
                return
            try:
                lg._pending = False
                while True:
                    batch = self._channels.take(proxy, 64)
                    if not batch:
                        break
                    for seq, e in batch:
                        try:
                            lg.append(e)
                        except LogFull:
                            lg.discarded_full += 1
                            self._channels.reject(proxy, seq)
                        else:
                            self._channels.ack(proxy, seq)
            finally:
                lg._drain_lock.release()

    def get(self, log_id: str) -> Log:
        try:
            return self._logs[log_id]
        except (KeyError, TypeError):
            raise NoSuchLog(f"no log {log_id!r}") from None

    def query(self, log_id: str, c: Constraint | str | None = None, from_id: int = 1, max: int | None = None):
        """Records with ``id >= from_id`` matching ``c``, ascending, at most ``max``.

        Returns ``(records, next_id)``; ``next_id`` is where to resume paging,
        or None once the scan reached the end.
        """
        return self.get(log_id).query(as_constraint(c), from_id, max)

    def log_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._logs)

    def close(self) -> None:
        for lg in list(self._logs.values()):
            lg.close()


def _atomic_write(path: Path, data: bytes, fsync: bool) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        if fsync:
            f.flush()
            os.fsync(f.fileno())
    os.replace(tmp, path)
