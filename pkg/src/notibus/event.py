"""Structured events: the unit every channel, log and wire message carries."""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any

from . import codec
from .codec import INT_MAX, INT_MIN, Value, values_equal
from .errors import DecodeError, InvalidEvent

RECOGNIZED_VARIABLE_KEYS = ("priority", "timeout_ms")


@dataclass(frozen=True)
class FixedHeader:
    domain_name: str
    type_name: str
    event_name: str = ""


@dataclass(frozen=True, eq=False)
class StructuredEvent:
    """Fixed header, QoS hints, flat filterable fields and an opaque payload.

    Mapping fields are copied into read-only views on construction. Equality
    is structural under :func:`notibus.codec.values_equal`, so ``1``, ``1.0``
    and ``True`` are different field values.
    """

    header: FixedHeader
    variable_header: Mapping[str, Value] = field(default_factory=dict)
    filterable_body: Mapping[str, Value] = field(default_factory=dict)
    payload: Value = None

    def __post_init__(self):
        object.__setattr__(self, "variable_header", MappingProxyType(dict(self.variable_header)))
        object.__setattr__(self, "filterable_body", MappingProxyType(dict(self.filterable_body)))

    def __eq__(self, other):
        if not isinstance(other, StructuredEvent):
            return NotImplemented
        return (
            self.header == other.header
            and values_equal(self.variable_header, other.variable_header)
            and values_equal(self.filterable_body, other.filterable_body)
            and values_equal(self.payload, other.payload)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def priority(self) -> int:
        return self.variable_header.get("priority", 0)

    def to_value(self) -> dict:
        h = self.header
        return {
            "header": {"domain_name": h.domain_name, "event_name": h.event_name, "type_name": h.type_name},
            "variable_header": dict(self.variable_header),
            "filterable_body": dict(self.filterable_body),
            "payload": self.payload,
        }


def make_event(domain_name: str, type_name: str, event_name: str = "", *, body=None, variable_header=None, payload=None) -> StructuredEvent:
    return StructuredEvent(
        FixedHeader(domain_name, type_name, event_name),
        variable_header or {},
        body or {},
        payload,
    )


def value_violations(v: Any, where: str, allow_nan: bool, out: list, depth: int = 0) -> None:
    if depth > 200:
        out.append(f"{where}: nesting too deep")
        return
    if v is None or type(v) is bool or type(v) is str or type(v) is bytes:
        return
    if type(v) is int:
        if not INT_MIN <= v <= INT_MAX:
            out.append(f"{where}: integer out of 64-bit range")
    elif type(v) is float:
        if math.isnan(v) and not allow_nan:
            out.append(f"{where}: NaN outside payload")
    elif isinstance(v, (list, tuple)):
        for i, item in enumerate(v):
            value_violations(item, f"{where}[{i}]", allow_nan, out, depth + 1)
    elif isinstance(v, Mapping):
        for k, item in v.items():
            if type(k) is not str:
                out.append(f"{where}: map key {k!r} is not a string")
            else:
                value_violations(item, f"{where}.{k}", allow_nan, out, depth + 1)
    else:
        out.append(f"{where}: unsupported value type {type(v).__name__}")


_SCALARS = (type(None), bool, int, float, str)


def validate_event(e: Any) -> list[str]:
    """Return every violated invariant; an empty list means the event is valid."""
    out: list[str] = []
    h = getattr(e, "header", None)
    if not isinstance(h, FixedHeader):
        return ["header missing"]
    for name in ("domain_name", "type_name", "event_name"):
        if type(getattr(h, name)) is not str:
            out.append(f"{name} not a string")
    if h.domain_name == "":
        out.append("domain_name empty")
    if h.type_name == "":
        out.append("type_name empty")

    vh = e.variable_header
    if not isinstance(vh, Mapping):
        out.append("variable_header not a map")
    else:
        value_violations(vh, "variable_header", False, out)
        if "priority" in vh and type(vh["priority"]) is not int:
            out.append("priority not Int")
        if "timeout_ms" in vh:
            t = vh["timeout_ms"]
            if type(t) is not int:
                out.append("timeout_ms not Int")
            elif t < 0:
                out.append("timeout_ms negative")

    fb = e.filterable_body
    if not isinstance(fb, Mapping):
        out.append("filterable_body not a map")
    else:
        for k, v in fb.items():
            if type(k) is not str:
                out.append(f"filterable_body: key {k!r} is not a string")
            elif type(v) not in _SCALARS:
                out.append(f"non-flat filterable field: {k}")
            else:
                value_violations(v, f"filterable_body.{k}", False, out)

    value_violations(e.payload, "payload", True, out)
    return out


def check_event(e: StructuredEvent) -> None:
    violations = validate_event(e)
    if violations:
        raise InvalidEvent(violations)


def event_to_text(e: StructuredEvent) -> str:
    """Canonical text, computed once per event and cached on it."""
    text = e.__dict__.get("_canonical")
    if text is None:
        check_event(e)
        text = codec.encode_text(e.to_value())
        object.__setattr__(e, "_canonical", text)
    return text


def encode_event(e: StructuredEvent) -> bytes:
    """Canonical bytes; equal events always give identical bytes."""
    check_event(e)
    return codec.encode_value(e.to_value())


_EVENT_KEYS = {"header", "variable_header", "filterable_body", "payload"}
_HEADER_KEYS = {"domain_name", "event_name", "type_name"}


def event_from_value(v: Value) -> StructuredEvent:
    """Build an event from a decoded map, checking shape then invariants."""
    if type(v) is not dict or v.keys() != _EVENT_KEYS:
        raise DecodeError(0, "not an event object")
    h = v["header"]
    if type(h) is not dict or h.keys() != _HEADER_KEYS:
        raise DecodeError(0, "bad event header")
    vh, fb = v["variable_header"], v["filterable_body"]
    if type(vh) is not dict or type(fb) is not dict:
        raise DecodeError(0, "event headers must be maps")
    e = StructuredEvent(FixedHeader(h["domain_name"], h["type_name"], h["event_name"]), vh, fb, v["payload"])
    check_event(e)
    return e


def decode_event(b: bytes) -> StructuredEvent:
    return event_from_value(codec.decode_value(b))
