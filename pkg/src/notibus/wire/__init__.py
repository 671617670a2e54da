"""TCP protocol: framing, the asyncio broker server and a blocking client."""

from .client import EventStream, Session
from .frame import MAX_FRAME, PROTOCOL_VERSION, FrameBuffer, Message, decode_frame, encode_frame
from .server import DEFAULT_PORT, BrokerServer, ServerThread

__all__ = [
    "DEFAULT_PORT",
    "MAX_FRAME",
    "PROTOCOL_VERSION",
    "BrokerServer",
    "EventStream",
    "FrameBuffer",
    "Message",
    "ServerThread",
    "Session",
    "decode_frame",
    "encode_frame",
]
