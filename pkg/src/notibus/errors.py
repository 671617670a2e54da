"""Exception hierarchy shared by every service.

Each error carries a ``code`` (its class name) so the broker can ship it over
the wire and the client can re-raise the same class on the other side.
"""

from __future__ import annotations


class NotibusError(Exception):
    """Base class for every error raised by the middleware."""

    @property
    def code(self) -> str:
        return type(self).__name__


class DecodeError(NotibusError):
    def __init__(self, position: int, reason: str):
        self.position = position
        self.reason = reason
        super().__init__(f"decode error at {position}: {reason}")


class EncodeError(NotibusError):
    pass


class InvalidEvent(NotibusError):
    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ParseError(NotibusError):
    def __init__(self, offset: int, expected: str):
        self.offset = offset
        self.expected = expected
        super().__init__(f"parse error at offset {offset}: expected {expected}")


# channel
class InvalidQos(NotibusError):
    pass


class NoSuchChannel(NotibusError):
    pass


class NoSuchProxy(NotibusError):
    pass


# naming
class NamingError(NotibusError):
    pass


class NotFound(NamingError):
    pass


class AlreadyBound(NamingError):
    pass


class MissingContext(NamingError):
    pass


class InvalidName(NamingError):
    pass


class CannotRebindContext(NamingError):
    pass


class ContextNotEmpty(NamingError):
    pass


class NotAContext(NamingError):
    pass


# property
class NoSuchSet(NotibusError):
    pass


class NoSuchProperty(NotibusError):
    pass


# notifylog
class NoSuchLog(NotibusError):
    pass


class DuplicateLog(NotibusError):
    pass


class LogFull(NotibusError):
    pass


class InvalidLogConfig(NotibusError):
    pass


# wire
class FrameTooLarge(NotibusError):
    pass


class UnknownKind(NotibusError):
    pass


class ProtocolVersionMismatch(NotibusError):
    pass


class ProtocolError(NotibusError):
    pass


class BadRequest(NotibusError):
    pass


class BrokerUnreachable(NotibusError):
    pass


def _subclasses(cls):
    for sub in cls.__subclasses__():
        yield sub
        yield from _subclasses(sub)


ERRORS_BY_CODE: dict[str, type[NotibusError]] = {
    c.__name__: c for c in _subclasses(NotibusError)
}


def error_from_code(code: str, message: str) -> NotibusError:
    """Rebuild an error received from the broker.

    Classes whose constructors take structured arguments are rebuilt with the
    message in place of those arguments; the ``code`` is what callers match on.
    """
    cls = ERRORS_BY_CODE.get(code)
    if cls is None:
        err = NotibusError(message)
        err.remote_code = code
        return err
    err = cls.__new__(cls)
    Exception.__init__(err, message)
    if cls is InvalidEvent:
        err.violations = [message]
    elif cls is DecodeError:
        err.position, err.reason = -1, message
    elif cls is ParseError:
        err.offset, err.expected = -1, message
    return err
