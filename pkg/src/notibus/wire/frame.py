"""Length-prefixed frames carrying canonical-encoded messages.

A frame is a 4-byte big-endian body length followed by the UTF-8 body. The
body is the canonical encoding of ``{"args": {...}, "kind": str, "request_id": int}``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator

from .. import codec
from ..codec import Value
from ..errors import DecodeError, FrameTooLarge

MAX_FRAME = 16 * 1024 * 1024
HEADER = struct.Struct(">I")
PROTOCOL_VERSION = 1

KINDS = frozenset(
    {
        "Hello",
        "CreateChannel",
        "ConnectSupplier",
        "ConnectConsumer",
        "SetFilter",
        "Push",
        "Receive",
        "Disconnect",
        "Bind",
        "Rebind",
        "Resolve",
        "Unbind",
        "List",
        "BindNewContext",
        "DefineProperty",
        "GetProperty",
        "GetAll",
        "DeleteProperty",
        "CreateLog",
        "Query",
        "Subscribe",
        "Ack",
        "Deliver",
        "Error",
    }
)


@dataclass(frozen=True)
class Message:
    kind: str
    request_id: int
    args: dict[str, Value] = field(default_factory=dict)

    def to_value(self) -> dict:
        return {"args": self.args, "kind": self.kind, "request_id": self.request_id}


def message_from_value(v: Value) -> Message:
    if type(v) is not dict or v.keys() != {"args", "kind", "request_id"}:
        raise DecodeError(0, "message must be a map with args, kind and request_id")
    kind, rid, args = v["kind"], v["request_id"], v["args"]
    if type(kind) is not str or not kind:
        raise DecodeError(0, "message kind must be a non-empty string")
    if type(rid) is not int or rid < 0:
        raise DecodeError(0, "request_id must be a non-negative int")
    if type(args) is not dict:
        raise DecodeError(0, "args must be a map")
    return Message(kind, rid, args)


def encode_body(m: Message) -> bytes:
    return codec.encode_value(m.to_value())


def frame_bytes(body: bytes) -> bytes:
    if len(body) > MAX_FRAME:
        raise FrameTooLarge(f"frame body of {len(body)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(body)) + body


def encode_frame(m: Message) -> bytes:
    return frame_bytes(encode_body(m))


def decode_body(body: bytes) -> Message:
    return message_from_value(codec.decode_value(body))


def decode_frame(data: bytes) -> Message:
    """Decode exactly one complete frame."""
    if len(data) < HEADER.size:
        raise DecodeError(len(data), "Truncated")
    (length,) = HEADER.unpack_from(data)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"frame length {length} exceeds {MAX_FRAME}")
    if len(data) < HEADER.size + length:
        raise DecodeError(len(data), "Truncated")
    if len(data) > HEADER.size + length:
        raise DecodeError(HEADER.size + length, "trailing bytes after frame")
    return decode_body(data[HEADER.size :])


class FrameBuffer:
    """Incremental decoder: feed bytes, pull complete frame bodies.

    A partially received frame just waits for more bytes; :meth:`close`
    reports a frame cut off by end of stream.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf += data

    def bodies(self) -> Iterator[bytes]:
        buf = self._buf
        pos = 0
        try:
            while len(buf) - pos >= 4:
                (length,) = HEADER.unpack_from(buf, pos)
                if length > MAX_FRAME:
                    raise FrameTooLarge(f"frame length {length} exceeds {MAX_FRAME}")
                end = pos + 4 + length
                if end > len(buf):
                    break
                body = bytes(buf[pos + 4 : end])
                pos = end  # consumed even if the caller stops iterating here
                yield body
        finally:
            del buf[:pos]

    def messages(self) -> Iterator[Message]:
        for body in self.bodies():
            yield decode_body(body)

    @property
    def pending(self) -> int:
        return len(self._buf)

    def close(self) -> None:
        if self._buf:
            raise DecodeError(len(self._buf), "Truncated")
