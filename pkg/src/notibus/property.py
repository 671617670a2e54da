"""Property sets: named collections of uniquely named values.

Each set is persisted as ``<data-dir>/props/<set_id>`` holding the canonical
encoding of its entries map, rewritten atomically on every change.
"""

from __future__ import annotations

import logging
import os
import threading
from pathlib import Path

from . import codec
from .codec import Value
from .errors import DecodeError, InvalidName, NoSuchProperty, NoSuchSet
from .event import value_violations

log = logging.getLogger(__name__)


def _check_set_id(set_id: str) -> None:
    if type(set_id) is not str or set_id in ("", ".", "..") or "/" in set_id or "\0" in set_id or set_id.startswith(".tmp-"):
        raise InvalidName(f"bad property set id {set_id!r}")


class PropertyService:
    def __init__(self, data_dir: str | os.PathLike | None = None, fsync: bool = True):
        self._sets: dict[str, dict[str, Value]] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._lock = threading.Lock()
        self._fsync = fsync
        self._dir = Path(data_dir) / "props" if data_dir is not None else None
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
            self._restore()

    def _restore(self) -> None:
        for path in sorted(self._dir.iterdir()):
            if path.name.startswith(".tmp-"):
                path.unlink(missing_ok=True)
                continue
            try:
                entries = codec.decode_value(path.read_bytes())
            except (DecodeError, OSError) as e:
                log.error("skipping unreadable property set %s: %s", path, e)
                continue
            if type(entries) is not dict:
                log.error("skipping property set %s: not a map", path)
                continue
            self._sets[path.name] = entries
            self._locks[path.name] = threading.Lock()

    def _set_lock(self, set_id: str, create: bool) -> threading.Lock:
        with self._lock:
            lock = self._locks.get(set_id)
            if lock is None:
                if not create:
                    raise NoSuchSet(set_id)
                lock = self._locks[set_id] = threading.Lock()
                self._sets[set_id] = {}
            return lock

    def _persist(self, set_id: str, entries: dict) -> None:
        if self._dir is None:
            return
        data = codec.encode_value(entries)
        tmp = self._dir / f".tmp-{set_id}"
        with open(tmp, "wb") as f:
            f.write(data)
            if self._fsync:
                f.flush()
                os.fsync(f.fileno())
        os.replace(tmp, self._dir / set_id)

    def define_property(self, set_id: str, name: str, v: Value) -> None:
        _check_set_id(set_id)
        if type(name) is not str or name == "":
            raise InvalidName("property name must be a non-empty string")
        problems: list[str] = []
        value_violations(v, name, True, problems)
        if problems:
            raise InvalidName("; ".join(problems))
        with self._set_lock(set_id, create=True):
            entries = dict(self._sets[set_id])
            entries[name] = v
            self._persist(set_id, entries)
            self._sets[set_id] = entries

    def get_property(self, set_id: str, name: str) -> Value:
        with self._set_lock(set_id, create=False):
            try:
                return self._sets[set_id][name]
            except KeyError:
                raise NoSuchProperty(f"{set_id}/{name}") from None

    def get_all(self, set_id: str) -> dict[str, Value]:
        with self._set_lock(set_id, create=False):
            # entries maps are replaced, never mutated, so a shallow copy is a snapshot
            return dict(self._sets[set_id])

    def delete_property(self, set_id: str, name: str) -> None:
        with self._set_lock(set_id, create=False):
            entries = self._sets[set_id]
            if name not in entries:
                raise NoSuchProperty(f"{set_id}/{name}")
            entries = dict(entries)
            del entries[name]
            self._persist(set_id, entries)
            self._sets[set_id] = entries

    def set_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._sets)
