import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dts.ast import (
    ArityViolation,
    AstNode,
    CardinalityViolation,
    DepthUnsatisfiable,
    SexprSyntaxError,
    TypeMismatch,
    ast_depth,
    make_node,
    min_depths,
    parse_sexpr,
    random_ast,
    to_sexpr,
    validate,
)
from dts.corpus import DEFAULT_TOKENS

from conftest import IF_PASS_SEXPR, TOY


def test_mini_codec(mini, if_pass_ast):
    assert to_sexpr(if_pass_ast) == IF_PASS_SEXPR
    built = make_node(mini, "If", make_node(mini, "Attribute", make_node(mini, "Name", "six"), "PY3"),
                      [make_node(mini, "Pass")], [])
    assert built == if_pass_ast
    assert ast_depth(if_pass_ast) == 3


def test_tokens_with_quotes_round_trip(mini):
    node = make_node(mini, "Name", 'a "quoted" \\ token')
    text = to_sexpr(node)
    assert parse_sexpr(text, mini, expected_type="expr") == node


@pytest.mark.parametrize("text,exc", [
    ("(If (Name \"x\") (list) (list)", SexprSyntaxError),
    ("(Pass))", SexprSyntaxError),
    ('(Name "x', SexprSyntaxError),
    ("(Pass extra)", ArityViolation),
    ("(Bogus)", TypeMismatch),
    ('(If (Pass) (list) (list))', TypeMismatch),
    ('(If (Name "x") (Pass) (list))', CardinalityViolation),
    ('(If (Name x) (list) (list))', TypeMismatch),
])
def test_malformed(mini, text, exc):
    with pytest.raises(exc):
        parse_sexpr(text, mini)


def test_validate_expected_type(mini, if_pass_ast):
    validate(if_pass_ast, mini)
    with pytest.raises(TypeMismatch):
        validate(if_pass_ast, mini, expected_type="expr")


def test_single_field_count(mini):
    bad = AstNode(mini.constructor("Name"), (("a", "b"),))
    with pytest.raises(CardinalityViolation):
        validate(bad, mini, "expr")
    validate(bad, mini, "expr", multi_token=True)


def test_optional_field(toy_grammars):
    g = toy_grammars["ifttt"]
    arg = parse_sexpr('(Argument "k" (list))', g, expected_type="argument")
    assert arg["value"] == ()
    with pytest.raises(CardinalityViolation):
        parse_sexpr('(Argument "k" (list "a" "b"))', g, expected_type="argument")


def test_min_depths(mini):
    assert min_depths(mini) == {"stmt": 1, "expr": 1}


def test_depth_unsatisfiable(mini):
    with pytest.raises(DepthUnsatisfiable):
        random_ast(mini, np.random.default_rng(0), 0, DEFAULT_TOKENS)


def test_random_ast_is_deterministic(toy_grammars):
    g = toy_grammars["python"]
    a = random_ast(g, np.random.default_rng(5), 5, DEFAULT_TOKENS)
    b = random_ast(g, np.random.default_rng(5), 5, DEFAULT_TOKENS)
    assert a == b


@settings(max_examples=60, deadline=None)
@given(name=st.sampled_from(TOY), seed=st.integers(0, 2**32 - 1), depth=st.integers(1, 6))
def test_random_asts_validate_and_round_trip(toy_grammars, name, seed, depth):
    g = toy_grammars[name]
    depth = max(depth, int(min_depths(g)[g.root_type]))
    ast = random_ast(g, np.random.default_rng(seed), depth, DEFAULT_TOKENS)
    validate(ast, g)
    assert ast_depth(ast) <= depth
    assert parse_sexpr(to_sexpr(ast), g) == ast
