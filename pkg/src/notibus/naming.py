"""Hierarchical naming: contexts map unique components to objects or child contexts."""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Sequence, Union

from .errors import (
    AlreadyBound,
    CannotRebindContext,
    ContextNotEmpty,
    InvalidName,
    MissingContext,
    NotAContext,
    NotFound,
)


class RefKind(str, enum.Enum):
    CHANNEL_FACTORY = "ChannelFactory"
    CHANNEL = "Channel"
    LOG = "Log"
    PROPERTY_SET = "PropertySet"
    NAMING_CONTEXT = "NamingContext"


@dataclass(frozen=True)
class ServiceRef:
    """Opaque locator for a broker-hosted object: its kind plus an id."""

    kind: RefKind
    id: str

    def __post_init__(self):
        object.__setattr__(self, "kind", RefKind(self.kind))

    def to_value(self) -> dict:
        return {"id": self.id, "kind": self.kind.value}

    @classmethod
    def from_value(cls, v) -> "ServiceRef":
        try:
            return cls(RefKind(v["kind"]), str(v["id"]))
        except (KeyError, TypeError, ValueError):
            raise InvalidName(f"malformed service ref {v!r}") from None


class BindingKind(str, enum.Enum):
    OBJECT = "Object"
    CONTEXT = "Context"


NameLike = Union[str, Sequence[str]]


def parse_name(n: NameLike) -> tuple[str, ...]:
    """Accept ``"a/b/c"`` or a sequence of components."""
    if isinstance(n, str):
        parts = tuple(n.split("/"))
    else:
        try:
            parts = tuple(n)
        except TypeError:
            raise InvalidName(f"not a name: {n!r}") from None
    if not parts:
        raise InvalidName("name has no components")
    for p in parts:
        if type(p) is not str or p == "" or "/" in p:
            raise InvalidName(f"bad name component {p!r}")
    return parts


def format_name(parts: Sequence[str]) -> str:
    return "/".join(parts)


class _Context:
    __slots__ = ("bindings",)

    def __init__(self):
        # component -> ServiceRef | _Context
        self.bindings: dict[str, ServiceRef | _Context] = {}


class NamingService:
    def __init__(self):
        self._root = _Context()
        self._lock = threading.Lock()

    def _parent(self, parts: tuple[str, ...], missing=MissingContext) -> _Context:
        ctx = self._root
        for comp in parts[:-1]:
            nxt = ctx.bindings.get(comp)
            if not isinstance(nxt, _Context):
                raise missing(f"no context {comp!r} in {format_name(parts)!r}")
            ctx = nxt
        return ctx

    def bind(self, n: NameLike, ref: ServiceRef) -> None:
        parts = parse_name(n)
        with self._lock:
            parent = self._parent(parts)
            if parts[-1] in parent.bindings:
                raise AlreadyBound(format_name(parts))
            parent.bindings[parts[-1]] = ref

    def rebind(self, n: NameLike, ref: ServiceRef) -> None:
        parts = parse_name(n)
        with self._lock:
            parent = self._parent(parts)
            if isinstance(parent.bindings.get(parts[-1]), _Context):
                raise CannotRebindContext(format_name(parts))
            parent.bindings[parts[-1]] = ref

    def bind_new_context(self, n: NameLike) -> None:
        parts = parse_name(n)
        with self._lock:
            parent = self._parent(parts)
            if parts[-1] in parent.bindings:
                raise AlreadyBound(format_name(parts))
            parent.bindings[parts[-1]] = _Context()

    def resolve(self, n: NameLike) -> ServiceRef:
        """Bound ref, or a ``NamingContext`` ref when ``n`` names a context."""
        parts = parse_name(n)
        with self._lock:
            target = self._parent(parts, NotFound).bindings.get(parts[-1])
        if target is None:
            raise NotFound(format_name(parts))
        if isinstance(target, _Context):
            return ServiceRef(RefKind.NAMING_CONTEXT, format_name(parts))
        return target

    def unbind(self, n: NameLike) -> None:
        parts = parse_name(n)
        with self._lock:
            parent = self._parent(parts, NotFound)
            target = parent.bindings.get(parts[-1])
            if target is None:
                raise NotFound(format_name(parts))
            if isinstance(target, _Context) and target.bindings:
                raise ContextNotEmpty(format_name(parts))
            del parent.bindings[parts[-1]]

    def list(self, n: NameLike | None = None) -> list[tuple[str, BindingKind]]:
        """Direct bindings of a context (root when ``n`` is None), sorted."""
        with self._lock:
            if n is None or (isinstance(n, (str, tuple, list)) and len(n) == 0):
                ctx = self._root
            else:
                parts = parse_name(n)
                ctx = self._parent(parts, NotFound).bindings.get(parts[-1])
                if ctx is None:
                    raise NotFound(format_name(parts))
                if not isinstance(ctx, _Context):
                    raise NotAContext(format_name(parts))
            items = [
                (comp, BindingKind.CONTEXT if isinstance(t, _Context) else BindingKind.OBJECT)
                for comp, t in ctx.bindings.items()
            ]
        return sorted(items)
