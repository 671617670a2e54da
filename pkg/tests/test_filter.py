import math
import random

import pytest
from hypothesis import given, settings

from notibus.errors import ParseError
from notibus.event import FixedHeader, make_event
from notibus.filter import (
    And,
    BoolLit,
    Compare,
    Exists,
    Field,
    Literal,
    Not,
    Or,
    eval_constraint,
    match_subscription,
    parse_constraint,
    print_constraint,
)

from reference_filter import reference_eval
from strategies import constraints, depth, filter_events, rand_constraint, rand_filter_event

EVENT = make_event("PS", "current", "e1", body={"value": 4, "name": "beam", "flag": True, "f": 2.5})


def test_empty_is_true():
    assert parse_constraint("") == BoolLit(True)
    assert parse_constraint("  \n\t") == BoolLit(True)


def test_and_example():
    c = parse_constraint("$type_name == 'current' and $.value > 3.5")
    assert c == And(
        Compare(Field("$type_name"), "==", Literal("current")),
        Compare(Field("$.value"), ">", Literal(3.5)),
    )
    assert parse_constraint(print_constraint(c)) == c


def test_truncated_operand():
    with pytest.raises(ParseError) as ei:
        parse_constraint("$.a >")
    assert ei.value.offset == 5
    assert "operand" in ei.value.expected


def test_print_bool_lit():
    assert print_constraint(BoolLit(True)) == "true"
    assert print_constraint(BoolLit(False)) == "false"


def test_precedence():
    c = parse_constraint("not $.a == 1 or $.b == 2 and $.c == 3")
    a, b, cc = (Compare(Field(f"$.{n}"), "==", Literal(v)) for n, v in (("a", 1), ("b", 2), ("c", 3)))
    assert c == Or(Not(a), And(b, cc))


def test_left_associative():
    c = parse_constraint("true and false and true")
    assert c == And(And(BoolLit(True), BoolLit(False)), BoolLit(True))


def test_literals():
    assert parse_constraint("$.a == 'it\\'s'").right == Literal("it's")
    assert parse_constraint("$.a == 'b\\\\s'").right == Literal("b\\s")
    assert parse_constraint("$.a == -7").right == Literal(-7)
    assert parse_constraint("$.a == 1e3").right == Literal(1000.0)
    assert parse_constraint("$.a == true").right == Literal(True)
    assert parse_constraint("false != $.a").left == Literal(False)
    assert parse_constraint("exist $event_name") == Exists(Field("$event_name"))


@pytest.mark.parametrize(
    "text, offset",
    [
        ("(", 1),
        ("$.a == 1 )", 9),
        ("$.a = 1", 4),
        ("$.a == 'x", 7),
        ("$foo == 1", 0),
        ("exist 3", 6),
        ("$.a == 1 and", 12),
        ("bogus", 0),
        ("$.a == 99999999999999999999", 7),
        ("And $.a == 1", 0),
    ],
)
def test_parse_errors(text, offset):
    with pytest.raises(ParseError) as ei:
        parse_constraint(text)
    assert ei.value.offset == offset


@pytest.mark.parametrize(
    "text, expected",
    [
        ("true", True),
        ("$.value > 3.5", True),
        ("$.value == 4.0", True),
        ("$.value == 4", True),
        ("$.f < 3", True),
        ("$.missing == 1", False),
        ("$.missing != 1", False),
        ("exist $.missing", False),
        ("not ($.missing == 1)", True),
        ("exist $.value", True),
        ("exist $domain_name", True),
        ("$.name == 4", False),
        ("$.name != 4", False),
        ("$.name ~ 'ea'", True),
        ("$.name ~ 'x'", False),
        ("$.value ~ 4", False),
        ("$.name < 'c'", True),
        ("$.flag == true", True),
        ("$.flag != false", True),
        ("$.flag < true", False),
        ("$.flag == 1", False),
        ("$domain_name == 'PS' and $event_name == 'e1'", True),
        ("$type_name ~ 'urr'", True),
    ],
)
def test_eval_examples(text, expected):
    assert eval_constraint(parse_constraint(text), EVENT) is expected


def test_null_field_matches_nothing():
    e = make_event("d", "t", body={"x": None})
    assert not eval_constraint(parse_constraint("$.x == 0"), e)
    assert eval_constraint(parse_constraint("exist $.x"), e)


def test_large_int_vs_float_compares_as_binary64():
    e = make_event("d", "t", body={"x": 2**53 + 1})
    assert eval_constraint(parse_constraint(f"$.x == {float(2**53)!r}"), e)
    assert not eval_constraint(parse_constraint(f"$.x == {2**53}"), e)


def test_infinite_literal_prints_and_parses():
    c = Compare(Field("$.a"), "<", Literal(math.inf))
    assert parse_constraint(print_constraint(c)) == c


def test_subscriptions():
    h = FixedHeader("PS", "current")
    assert match_subscription([], h)
    assert match_subscription([("PS", "*")], h)
    assert match_subscription([("*", "current")], h)
    assert not match_subscription([("PS", "current")], FixedHeader("RF", "current"))
    assert match_subscription([("RF", "*"), ("PS", "current")], h)
    assert not match_subscription([("ps", "current")], h)


@settings(max_examples=400)
@given(constraints(6))
def test_parse_print_round_trip(c):
    assert depth(c) <= 6
    assert parse_constraint(print_constraint(c)) == c


@settings(max_examples=400)
@given(constraints(5), filter_events())
def test_matches_reference(c, e):
    assert eval_constraint(c, e) == reference_eval(c, e)


@settings(max_examples=400)
@given(constraints(4), constraints(4), filter_events())
def test_de_morgan(a, b, e):
    assert eval_constraint(Not(And(a, b)), e) == eval_constraint(Or(Not(a), Not(b)), e)
    assert eval_constraint(Not(Or(a, b)), e) == eval_constraint(And(Not(a), Not(b)), e)


def test_ten_thousand_random_pairs():
    rng = random.Random(99)
    for _ in range(10_000):
        c = rand_constraint(rng, 6)
        e = rand_filter_event(rng)
        assert depth(c) <= 6
        assert eval_constraint(c, e) == reference_eval(c, e)
        assert eval_constraint(c, e) == eval_constraint(c, e)
        assert parse_constraint(print_constraint(c)) == c
