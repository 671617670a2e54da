"""Canonical text encoding of values.

One codec serves event encoding, wire message bodies, log records and
property files. A value is one of::

    None | bool | int (signed 64-bit) | float | str | bytes | list | dict[str, value]

Syntax (no whitespace is emitted)::

    null  true  false
    -12                  ints in minimal decimal
    1.5  1e+16  -inf nan floats in shortest round-trip form (always with '.', 'e', or a named constant)
    "a\\"b"              strings; escapes \\" \\\\ \\n \\t \\r \\uXXXX, UTF-8 otherwise
    b"AAEC"              bytes, standard base64
    [v,v]                lists
    {"k":v}              maps, keys sorted by UTF-8 byte order

The decoder additionally tolerates insignificant whitespace and the JSON
escapes \\b \\f \\/ so hand-written bodies are accepted; output is always
canonical.
"""

from __future__ import annotations

import base64
import binascii
import json
import math
import re
from collections.abc import Mapping
from typing import Any, Union

from .errors import DecodeError, EncodeError

Value = Union[None, bool, int, float, str, bytes, list, dict]

INT_MIN = -(2**63)
INT_MAX = 2**63 - 1

_ESCAPES = {i: f"\\u{i:04x}" for i in range(0x20)}
_ESCAPES.update({ord('"'): '\\"', ord("\\"): "\\\\", ord("\n"): "\\n", ord("\t"): "\\t", ord("\r"): "\\r"})
_NEEDS_ESCAPE = re.compile(r'["\\\x00-\x1f]')


def _encode_str(s: str) -> str:
    if _NEEDS_ESCAPE.search(s) is None:
        return '"' + s + '"'
    return '"' + s.translate(_ESCAPES) + '"'


def _float_text(x: float) -> str:
    if x != x:
        return "nan"
    if x == math.inf:
        return "inf"
    if x == -math.inf:
        return "-inf"
    return repr(x)


def _key_order(k: str) -> str:
    # code point order equals UTF-8 byte order for valid text
    return k


def _encode(v: Any, out: list) -> None:
    t = type(v)
    if t is str:
        out.append(_encode_str(v))
    elif t is int:
        if not INT_MIN <= v <= INT_MAX:
            raise EncodeError(f"integer out of 64-bit range: {v}")
        out.append(str(v))
    elif t is dict:
        out.append("{")
        first = True
        for k in sorted(v, key=_key_order):
            if type(k) is not str:
                raise EncodeError(f"map key must be str, got {type(k).__name__}")
            if not first:
                out.append(",")
            first = False
            out.append(_encode_str(k))
            out.append(":")
            _encode(v[k], out)
        out.append("}")
    elif v is None:
        out.append("null")
    elif t is bool:
        out.append("true" if v else "false")
    elif t is float:
        out.append(_float_text(v))
    elif t is list or t is tuple:
        out.append("[")
        for i, item in enumerate(v):
            if i:
                out.append(",")
            _encode(item, out)
        out.append("]")
    elif t is bytes or t is bytearray:
        out.append('b"' + base64.b64encode(bytes(v)).decode("ascii") + '"')
    elif isinstance(v, Mapping):
        _encode(dict(v), out)
    else:
        raise EncodeError(f"unsupported value type {t.__name__}")


def encode_value(v: Any) -> bytes:
    """Canonical UTF-8 bytes for ``v``."""
    try:
        return encode_text(v).encode("utf-8")
    except UnicodeEncodeError as e:
        raise EncodeError("string is not valid UTF-8 text (lone surrogate)") from e


def encode_text(v: Any) -> str:
    out: list = []
    _encode(v, out)
    return "".join(out)


_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\n\r]+)
  | (?P<str>"(?:[^"\\\x00-\x1f]|\\.)*")
  | (?P<bytes>b"[A-Za-z0-9+/=]*")
  | (?P<num>-?(?:0|[1-9][0-9]*)(?P<frac>\.[0-9]+)?(?P<exp>[eE][+-]?[0-9]+)?)
  | (?P<const>-inf|inf|nan|null|true|false)
  | (?P<punct>[\[\]{}:,])
    """,
    re.VERBOSE | re.DOTALL,
)
_SIMPLE_ESCAPES = {'"': '"', "\\": "\\", "/": "/", "b": "\b", "f": "\f", "n": "\n", "r": "\r", "t": "\t"}
_ESCAPE_SEQ = re.compile(r"\\(u[0-9a-fA-F]{4}|.)", re.DOTALL)
_CONSTS = {"null": None, "true": True, "false": False, "inf": math.inf, "-inf": -math.inf, "nan": math.nan}


def _unescape(body: str, start: int) -> str:
    def repl(m: re.Match) -> str:
        seq = m.group(1)
        if seq[0] == "u":
            cp = int(seq[1:], 16)
            if 0xD800 <= cp < 0xE000:
                raise DecodeError(start + m.start(), "surrogate escapes are not allowed")
            return chr(cp)
        try:
            return _SIMPLE_ESCAPES[seq]
        except KeyError:
            raise DecodeError(start + m.start(), f"bad escape \\{seq}") from None

    return _ESCAPE_SEQ.sub(repl, body)


def _tokenize(text: str) -> list:
    tokens = []
    pos = 0
    n = len(text)
    match = _TOKEN.match
    while pos < n:
        m = match(text, pos)
        if m is None:
            raise DecodeError(pos, f"unexpected character {text[pos]!r}")
        kind = m.lastgroup
        if kind == "frac" or kind == "exp":
            kind = "num"
        if kind != "ws":
            tokens.append((kind, m.group(), pos, m))
        pos = m.end()
    return tokens


class _Parser:
    __slots__ = ("tokens", "i", "end")

    def __init__(self, tokens: list, end: int):
        self.tokens = tokens
        self.i = 0
        self.end = end

    def _next(self, expected: str):
        try:
            tok = self.tokens[self.i]
        except IndexError:
            raise DecodeError(self.end, f"truncated input, expected {expected}") from None
        self.i += 1
        return tok

    def value(self) -> Value:
        kind, text, pos, m = self._next("value")
        if kind == "str":
            body = text[1:-1]
            return _unescape(body, pos + 1) if "\\" in body else body
        if kind == "num":
            if m.group("frac") is None and m.group("exp") is None:
                v = int(text)
                if not INT_MIN <= v <= INT_MAX:
                    raise DecodeError(pos, "integer out of 64-bit range")
                return v
            return float(text)
        if kind == "const":
            return _CONSTS[text]
        if kind == "bytes":
            try:
                return base64.b64decode(text[2:-1], validate=True)
            except (binascii.Error, ValueError):
                raise DecodeError(pos, "bad base64") from None
        if text == "[":
            return self._list()
        if text == "{":
            return self._map()
        raise DecodeError(pos, f"unexpected {text!r}")

    def _list(self) -> list:
        out = []
        tokens = self.tokens
        if self.i < len(tokens) and tokens[self.i][1] == "]":
            self.i += 1
            return out
        while True:
            out.append(self.value())
            _, text, pos, _ = self._next("',' or ']'")
            if text == "]":
                return out
            if text != ",":
                raise DecodeError(pos, "expected ',' or ']'")

    def _map(self) -> dict:
        out: dict = {}
        tokens = self.tokens
        if self.i < len(tokens) and tokens[self.i][1] == "}":
            self.i += 1
            return out
        while True:
            kind, text, pos, _ = self._next("map key")
            if kind != "str":
                raise DecodeError(pos, "map key must be a string")
            body = text[1:-1]
            key = _unescape(body, pos + 1) if "\\" in body else body
            if key in out:
                raise DecodeError(pos, f"duplicate map key {key!r}")
            _, text, pos, _ = self._next("':'")
            if text != ":":
                raise DecodeError(pos, "expected ':'")
            out[key] = self.value()
            _, text, pos, _ = self._next("',' or '}'")
            if text == "}":
                return out
            if text != ",":
                raise DecodeError(pos, "expected ',' or '}'")


def _check_pairs(pairs):
    d = dict(pairs)
    if len(d) != len(pairs):
        raise DecodeError(-1, "duplicate map key")
    return d


def _reject_constant(name):
    raise DecodeError(-1, f"unknown constant {name}")


class _Unmarkable(Exception):
    """The fast path cannot decide; the full parser takes over."""


def _checked_int(text: str) -> int:
    v = int(text)
    if not INT_MIN <= v <= INT_MAX:
        raise _Unmarkable
    return v


_json_decoder = json.JSONDecoder(
    object_pairs_hook=_check_pairs, parse_constant=_reject_constant, parse_int=_checked_int, strict=True
)

# Bytes and named float constants are rewritten into marker strings so the C
# scanner can still do the work. A rewrite only fires at a value position
# (after ':', ',' or '[') and always begins with '"\\u0000'; a match inside a
# string literal therefore leaves a stray backslash outside any string, the
# JSON parse fails, and the full parser decides. Marker contents are checked
# when converted back, and a genuine string starting with the marker also
# takes the full parser.
_MARK = "\x00\x01"
_MARK_ESCAPED = "\\u0000\\u0001"
_CONST_TOKEN = re.compile(r"(?<=[:,\[])(-?inf|nan)(?=[,\]}])")
_MARKED_CONSTS = {_MARK + "inf": math.inf, _MARK + "-inf": -math.inf, _MARK + "nan": math.nan}


def _unmark_str(v: str):
    if v[2:3] == "b":
        try:
            return base64.b64decode(v[3:], validate=True)
        except (binascii.Error, ValueError):
            raise _Unmarkable from None
    return _MARKED_CONSTS[v]


def _unmark_list(v: list) -> list:
    out = v
    for i, x in enumerate(v):
        t = type(x)
        if t is str:
            if x[:2] == _MARK:
                if out is v:
                    out = list(v)
                out[i] = _unmark_str(x)
        elif t is list:
            y = _unmark_list(x)
            if y is not x:
                if out is v:
                    out = list(v)
                out[i] = y
    return out


def _unmark(v):
    if type(v) is str:
        return _unmark_str(v) if v[:2] == _MARK else v
    if type(v) is list:
        return _unmark_list(v)
    return v


def _check_marked_pairs(pairs):
    d = dict(pairs)
    if len(d) != len(pairs):
        raise _Unmarkable
    for k, v in pairs:
        if k[:2] == _MARK:
            raise _Unmarkable
        t = type(v)
        if t is str:
            if v[:2] == _MARK:
                d[k] = _unmark_str(v)
        elif t is list:
            d[k] = _unmark_list(v)
    return d


_marked_decoder = json.JSONDecoder(
    object_pairs_hook=_check_marked_pairs, parse_constant=_reject_constant, parse_int=_checked_int, strict=True
)


def decode_text(text: str) -> Value:
    """Parse one value occupying the whole of ``text``."""
    # Most input goes through the C JSON scanner; the full parser handles
    # errors, surrogate escapes, >64-bit ints and marker collisions.
    if "\\ud" not in text and "\\uD" not in text:
        try:
            if 'b"' in text or "inf" in text or "nan" in text:
                if _MARK_ESCAPED not in text:
                    marked = "[" + text + "]"
                    if 'b"' in text:
                        marked = (
                            marked.replace(':b"', ':"' + _MARK_ESCAPED + "b")
                            .replace(',b"', ',"' + _MARK_ESCAPED + "b")
                            .replace('[b"', '["' + _MARK_ESCAPED + "b")
                        )
                    if "inf" in text or "nan" in text:
                        marked = _CONST_TOKEN.sub(r'"\\u0000\\u0001\1"', marked)
                    wrapped = _marked_decoder.decode(marked)
                    if len(wrapped) != 1:
                        raise _Unmarkable
                    return _unmark(wrapped[0])
            else:
                return _json_decoder.decode(text)
        except (DecodeError, _Unmarkable, KeyError, ValueError, RecursionError):
            pass
    return decode_text_slow(text)


def decode_text_slow(text: str) -> Value:
    tokens = _tokenize(text)
    p = _Parser(tokens, len(text))
    try:
        v = p.value()
    except RecursionError:
        raise DecodeError(0, "nesting too deep") from None
    if p.i != len(tokens):
        raise DecodeError(tokens[p.i][2], "trailing data")
    return v


def decode_value(data: bytes) -> Value:
    try:
        text = data.decode("utf-8") if not isinstance(data, str) else data
    except UnicodeDecodeError as e:
        raise DecodeError(e.start, "invalid UTF-8") from None
    return decode_text(text)


def values_equal(a: Any, b: Any) -> bool:
    """Structural equality that keeps Bool, Int and Float distinct.

    Python's ``==`` treats ``True == 1 == 1.0``; the data model does not. All
    NaNs are equal to each other (they share one encoding) and ``-0.0`` differs
    from ``0.0``.
    """
    if isinstance(a, Mapping):
        if not isinstance(b, Mapping) or a.keys() != b.keys():
            return False
        return all(values_equal(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)):
        if not isinstance(b, (list, tuple)) or len(a) != len(b):
            return False
        return all(values_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, (bytes, bytearray)):
        return isinstance(b, (bytes, bytearray)) and a == b
    if type(a) is not type(b):
        return False
    if type(a) is float:
        if a != a or b != b:
            return a != a and b != b
        return a == b and math.copysign(1.0, a) == math.copysign(1.0, b)
    return a == b
