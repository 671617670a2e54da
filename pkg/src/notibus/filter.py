"""Constraint language for consumer filters and log queries.

Grammar, lowest precedence first (keywords are case-sensitive)::

    constraint := or
    or         := and { "or" and }
    and        := not { "and" not }
    not        := "not" not | prim
    prim       := compare | "(" or ")" | "exist" field | "true" | "false"
    compare    := operand relop operand
    relop      := "==" | "!=" | "<" | "<=" | ">" | ">=" | "~"
    operand    := field | literal
    field      := "$domain_name" | "$type_name" | "$event_name" | "$." ident
    literal    := int | float | "'" chars "'" | "true" | "false"

``true``/``false`` act as Bool literals when a relational operator follows,
otherwise as constant constraints. Inside quotes ``\\'`` and ``\\\\`` escape.

Evaluation is total. A comparison involving a missing field or operands of
incompatible types is false (``!=`` included). Int and Float compare as
binary64; Str compares by code point; Bool supports only ``==``/``!=``;
``~`` is substring containment on two strings.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence, Union

from .codec import INT_MAX, INT_MIN
from .errors import ParseError
from .event import FixedHeader, StructuredEvent

RELOPS = ("==", "!=", "<", "<=", ">", ">=", "~")
HEADER_FIELDS = ("$domain_name", "$type_name", "$event_name")
KEYWORDS = frozenset({"or", "and", "not", "exist", "true", "false"})


@dataclass(frozen=True)
class Field:
    """``$domain_name``/``$type_name``/``$event_name`` or ``$.ident`` (body field)."""

    name: str

    @property
    def body_key(self) -> str | None:
        return self.name[2:] if self.name.startswith("$.") else None


@dataclass(frozen=True, eq=False)
class Literal:
    value: Union[bool, int, float, str]

    def __eq__(self, other):
        if not isinstance(other, Literal):
            return NotImplemented
        a, b = self.value, other.value
        if type(a) is not type(b):
            return False
        if type(a) is float:
            return a == b and math.copysign(1.0, a) == math.copysign(1.0, b)
        return a == b

    def __hash__(self):
        return hash((type(self.value), self.value))


Operand = Union[Field, Literal]


@dataclass(frozen=True)
class Or:
    left: "Constraint"
    right: "Constraint"


@dataclass(frozen=True)
class And:
    left: "Constraint"
    right: "Constraint"


@dataclass(frozen=True)
class Not:
    operand: "Constraint"


@dataclass(frozen=True)
class Compare:
    left: Operand
    op: str
    right: Operand


@dataclass(frozen=True)
class Exists:
    field: Field


@dataclass(frozen=True)
class BoolLit:
    value: bool


Constraint = Union[Or, And, Not, Compare, Exists, BoolLit]
TRUE = BoolLit(True)

# Subscriptions are (domain_pattern, type_pattern) pairs; "*" matches anything.
Subscription = Sequence[tuple[str, str]]


_LEX = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<field>\$\.[A-Za-z_][A-Za-z0-9_]*|\$(?:domain_name|type_name|event_name)(?![A-Za-z0-9_]))
  | (?P<num>-?[0-9]+(?:\.[0-9]+)?(?:[eE][+-]?[0-9]+)?(?![A-Za-z0-9_.]))
  | (?P<str>'(?:[^'\\]|\\['\\])*')
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>==|!=|<=|>=|<|>|~)
  | (?P<paren>[()])
    """,
    re.VERBOSE | re.DOTALL,
)
_EOF = ("eof", "", 0)


def _lex(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos, n = 0, len(text)
    while pos < n:
        m = _LEX.match(text, pos)
        if m is None:
            if text[pos] == "'":
                raise ParseError(pos, "closing quote")
            if text[pos] == "$":
                raise ParseError(pos, "field name")
            raise ParseError(pos, "token")
        kind = m.lastgroup
        if kind == "word" and m.group() not in KEYWORDS:
            raise ParseError(pos, "keyword, field or literal")
        if kind != "ws":
            tokens.append((kind, m.group(), pos))
        pos = m.end()
    tokens.append(("eof", "", n))
    return tokens


def _literal_from_token(kind: str, text: str, pos: int) -> Literal:
    if kind == "num":
        if "." in text or "e" in text or "E" in text:
            return Literal(float(text))
        v = int(text)
        if not INT_MIN <= v <= INT_MAX:
            raise ParseError(pos, "integer literal within 64-bit range")
        return Literal(v)
    if kind == "str":
        return Literal(re.sub(r"\\(['\\])", r"\1", text[1:-1]))
    return Literal(text == "true")


class _Parser:
    def __init__(self, text: str):
        self.tokens = _lex(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def parse(self) -> Constraint:
        if self.peek()[0] == "eof":
            return TRUE
        c = self.or_()
        kind, text, pos = self.peek()
        if kind != "eof":
            raise ParseError(pos, "'and', 'or' or end of input")
        return c

    def or_(self) -> Constraint:
        left = self.and_()
        while self.peek()[1] == "or" and self.peek()[0] == "word":
            self.advance()
            left = Or(left, self.and_())
        return left

    def and_(self) -> Constraint:
        left = self.not_()
        while self.peek()[1] == "and" and self.peek()[0] == "word":
            self.advance()
            left = And(left, self.not_())
        return left

    def not_(self) -> Constraint:
        kind, text, _ = self.peek()
        if kind == "word" and text == "not":
            self.advance()
            return Not(self.not_())
        return self.prim()

    def prim(self) -> Constraint:
        kind, text, pos = self.peek()
        if kind == "paren" and text == "(":
            self.advance()
            c = self.or_()
            kind, text, pos = self.advance()
            if text != ")":
                raise ParseError(pos, "')'")
            return c
        if kind == "word" and text == "exist":
            self.advance()
            kind, text, pos = self.advance()
            if kind != "field":
                raise ParseError(pos, "field")
            return Exists(Field(text))
        if kind == "word" and text in ("true", "false") and self.tokens[self.i + 1][0] != "op":
            self.advance()
            return BoolLit(text == "true")
        left = self.operand()
        kind, text, pos = self.advance()
        if kind != "op":
            raise ParseError(pos, "relational operator")
        right = self.operand()
        return Compare(left, text, right)

    def operand(self) -> Operand:
        kind, text, pos = self.advance()
        if kind == "field":
            return Field(text)
        if kind in ("num", "str") or (kind == "word" and text in ("true", "false")):
            return _literal_from_token(kind, text, pos)
        raise ParseError(pos, "operand")


def parse_constraint(text: str) -> Constraint:
    """Parse constraint text; empty or blank text means "match everything"."""
    return _Parser(text).parse()


def _print_literal(v) -> str:
    if type(v) is bool:
        return "true" if v else "false"
    if type(v) is int:
        return str(v)
    if type(v) is float:
        if math.isnan(v):
            raise ValueError("NaN literal cannot be printed")
        if math.isinf(v):
            return "1e999" if v > 0 else "-1e999"
        return repr(v)
    return "'" + v.replace("\\", "\\\\").replace("'", "\\'") + "'"


def _print_operand(o: Operand) -> str:
    return o.name if isinstance(o, Field) else _print_literal(o.value)


def print_constraint(c: Constraint) -> str:
    """Fully parenthesised text that parses back to ``c``."""
    if isinstance(c, BoolLit):
        return "true" if c.value else "false"
    if isinstance(c, Compare):
        return f"({_print_operand(c.left)} {c.op} {_print_operand(c.right)})"
    if isinstance(c, And):
        return f"({print_constraint(c.left)} and {print_constraint(c.right)})"
    if isinstance(c, Or):
        return f"({print_constraint(c.left)} or {print_constraint(c.right)})"
    if isinstance(c, Not):
        return f"(not {print_constraint(c.operand)})"
    if isinstance(c, Exists):
        return f"(exist {c.field.name})"
    raise TypeError(f"not a constraint: {c!r}")


_MISSING = object()


def _resolve(o: Operand, e: StructuredEvent):
    if type(o) is Literal:
        return o.value
    name = o.name
    if name[1] == ".":
        return e.filterable_body.get(name[2:], _MISSING)
    h = e.header
    if name == "$type_name":
        return h.type_name
    if name == "$domain_name":
        return h.domain_name
    return h.event_name


def _compare(a, op: str, b) -> bool:
    ta, tb = type(a), type(b)
    if (ta is int or ta is float) and (tb is int or tb is float):
        if ta is not tb:
            a, b = float(a), float(b)
    elif ta is str and tb is str:
        if op == "~":
            return b in a
    elif ta is bool and tb is bool:
        if op == "==":
            return a == b
        if op == "!=":
            return a != b
        return False
    else:
        return False
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    return False


def eval_constraint(c: Constraint, e: StructuredEvent) -> bool:
    t = type(c)
    if t is Compare:
        a = _resolve(c.left, e)
        if a is _MISSING:
            return False
        b = _resolve(c.right, e)
        if b is _MISSING:
            return False
        return _compare(a, c.op, b)
    if t is And:
        return eval_constraint(c.left, e) and eval_constraint(c.right, e)
    if t is Or:
        return eval_constraint(c.left, e) or eval_constraint(c.right, e)
    if t is Not:
        return not eval_constraint(c.operand, e)
    if t is BoolLit:
        return c.value
    if t is Exists:
        key = c.field.body_key
        return True if key is None else key in e.filterable_body
    raise TypeError(f"not a constraint: {c!r}")


def match_subscription(s: Subscription, h: FixedHeader) -> bool:
    if not s:
        return True
    for domain, type_name in s:
        if (domain == "*" or domain == h.domain_name) and (type_name == "*" or type_name == h.type_name):
            return True
    return False


def as_constraint(c: Constraint | str | None) -> Constraint | None:
    """Accept either an AST or constraint text."""
    if c is None or not isinstance(c, str):
        return c
    return parse_constraint(c)
