"""Structured-event notification broker with naming, property and log services."""

from .broker import Broker
from .channel import (
    ChannelService,
    ConsumerStats,
    DiscardPolicy,
    OrderPolicy,
    PushStatus,
    QosProfile,
    Reliability,
)
from .codec import decode_value, encode_value, values_equal
from .errors import NotibusError
from .event import FixedHeader, StructuredEvent, decode_event, encode_event, make_event
from .filter import eval_constraint, parse_constraint, print_constraint
from .naming import NamingService, RefKind, ServiceRef
from .notifylog import FullAction, LogConfig, LogService
from .property import PropertyService

__all__ = [
    "Broker",
    "ChannelService",
    "ConsumerStats",
    "DiscardPolicy",
    "FixedHeader",
    "FullAction",
    "LogConfig",
    "LogService",
    "NamingService",
    "NotibusError",
    "OrderPolicy",
    "PropertyService",
    "PushStatus",
    "QosProfile",
    "RefKind",
    "Reliability",
    "ServiceRef",
    "StructuredEvent",
    "decode_event",
    "decode_value",
    "encode_event",
    "encode_value",
    "eval_constraint",
    "make_event",
    "parse_constraint",
    "print_constraint",
    "values_equal",
]
