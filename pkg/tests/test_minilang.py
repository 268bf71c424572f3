import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branchforge.corpus import GenerationConfig, generate_program
from branchforge.minilang import (LexError, ParseError, TestCase, parse, parse_program, parse_test,
                                  pretty_print, tokenize, untokenize)

FIG_LIKE = """def f(a, b):
  if a < 0:
    r = 1
  elif a == 0:
    r = 2
  else:
    r = 3
  return r + b
"""


def kinds(text):
    return [(t.kind, t.lexeme) for t in tokenize(text)]


def test_tokenize_minimal_statement():
    assert kinds("x = 1") == [("IDENT", "x"), ("EQ", "="), ("INT", "1")]


def test_tokenize_empty():
    assert tokenize("") == []


def test_tokenize_function_header():
    assert [k for k, _ in kinds("def f(a, b):")] == [
        "DEF", "IDENT", "LPAREN", "IDENT", "COMMA", "IDENT", "RPAREN", "COLON"]


def test_tokenize_layout_tokens():
    ks = [k for k, _ in kinds("def f(a):\n  return a\n")]
    assert ks[:7] == ["DEF", "IDENT", "LPAREN", "IDENT", "RPAREN", "COLON", "NEWLINE"]
    assert "INDENT" in ks and ks[-1] == "DEDENT"


def test_lex_error_location():
    with pytest.raises(LexError) as e:
        tokenize("x = 1\ny = $")
    assert e.value.line == 2 and e.value.col == 5


def test_smallest_program_tree():
    tree, prog = parse_program("def f(a):\n  return a", "f")
    assert [n.kind for n in tree.nodes] == ["FuncDef", "Param", "Block", "Return", "Var"]
    assert tree[0].children == [1, 2] and tree[2].children == [3] and tree[3].children == [4]
    assert prog.line_count == 2


def test_if_elif_else_children_are_ordered_arms():
    tree, _ = parse_program(FIG_LIKE)
    if_node = next(n for n in tree.nodes if n.kind == "If")
    arms = [tree[c].kind for c in if_node.children]
    assert arms == ["BinOp", "Block", "Elif", "Else"]
    expected = parse(tokenize(
        "def f(a, b):\n    if a < 0:\n        r = 1\n    elif a == 0:\n        r = 2\n"
        "    else:\n        r = 3\n    return r + b\n"))
    assert tree.structure() == expected.structure()


def test_malformed_header():
    with pytest.raises(ParseError) as e:
        parse(tokenize("def f(:"))
    assert e.value.line == 1


def test_parse_test_examples():
    assert parse_test("check f(2, true) == 5") == TestCase("f", (2, True), 5)
    assert parse_test("check f() == 0") == TestCase("f", (), 0)
    with pytest.raises(ParseError):
        parse_test("check f(2 == 3")


def test_bool_and_int_are_distinct_literals():
    assert parse_test("check f(1) == 1") != parse_test("check f(true) == true")


def test_pretty_print_canonical_indentation():
    text = "def f(a):\n      return a\n"
    tree = parse(tokenize(text))
    assert pretty_print(tree) == "def f(a):\n  return a\n"


def test_pretty_print_fragment():
    tree, _ = parse_program("def f(a):\n  return a + 1\n")
    ret = next(n for n in tree.nodes if n.kind == "Return")
    assert pretty_print(tree, ret.id) == "return a + 1\n"


def test_pretty_print_parenthesizes_by_precedence():
    text = "def f(a, b):\n  return (a + b) * (a - (b - 1))\n"
    tree = parse(tokenize(text))
    assert pretty_print(tree) == text
    again = parse(tokenize(pretty_print(tree)))
    assert again.structure() == tree.structure()


def test_nested_while_in_if_round_trip():
    text = ("def f(a, b):\n  x = 0\n  if a < b:\n    i = 0\n    while i < b:\n      x = x + a\n"
            "      i = i + 1\n  else:\n    x = -a\n  return x\n")
    tree = parse(tokenize(text))
    assert parse(tokenize(pretty_print(tree))).structure() == tree.structure()


programs = st.integers(0, 10_000).map(
    lambda s: generate_program(random.Random(s), GenerationConfig(), "f"))


@settings(max_examples=60, deadline=None)
@given(programs)
def test_round_trip_generated(text):
    tree = parse(tokenize(text))
    again = parse(tokenize(pretty_print(tree)))
    assert again.structure() == tree.structure()


@settings(max_examples=60, deadline=None)
@given(programs)
def test_tree_invariants_generated(text):
    tree = parse(tokenize(text))
    assert [n.id for n in tree.nodes] == list(range(len(tree)))
    seen_parent = {}
    for n in tree.nodes:
        assert n.line_start <= n.line_end
        for i, c in enumerate(n.children):
            child = tree[c]
            assert c not in seen_parent
            seen_parent[c] = n.id
            assert child.parent == n.id and child.order == i
            assert n.line_start <= child.line_start and child.line_end <= n.line_end
    assert set(seen_parent) == set(range(1, len(tree)))


@settings(max_examples=60, deadline=None)
@given(programs)
def test_untokenize_reconstructs(text):
    assert untokenize(tokenize(text), text) == text


literal = st.one_of(st.integers(-99, 99), st.booleans())


@given(st.sampled_from(["f", "score", "pick"]), st.lists(literal, max_size=4), literal)
def test_check_round_trip(name, args, expected):
    case = TestCase(name, tuple(args), expected)
    parsed = parse_test(case.source_text)
    assert parsed == case
    assert parsed.source_text == case.source_text
