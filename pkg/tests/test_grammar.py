import io
import math
import random
from collections import defaultdict
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grammarlm.grammar import (
    Alternation,
    CatalogError,
    CompileError,
    CyclicReference,
    DuplicateRule,
    EmptyCatalog,
    GrammarSyntaxError,
    Literal,
    NonTerminalRef,
    OptionalExpr,
    RuleRef,
    Sequence,
    branch_probabilities,
    compile_grammar,
    expand_nonterminals,
    load_catalog,
    parse_grammar,
    UnresolvedReference,
)
from grammarlm.synthetic import random_grammar
from grammarlm.wfst import enumerate_paths, forward_backward, sentence_distribution

DATA = Path(__file__).parent / "data"


def cook_dish():
    ast = parse_grammar((DATA / "cook_dish.grm").read_text())
    with open(DATA / "dish_name.txt") as fh:
        cat = load_catalog(fh, "DISH_NAME")
    return ast, cat


# Independent oracle: expand the AST directly into a sentence distribution.
def expand(expr, rules, catalogs):
    if isinstance(expr, Literal):
        return {(expr.word,): 1.0}
    if isinstance(expr, RuleRef):
        return expand(rules[expr.name], rules, catalogs)
    if isinstance(expr, NonTerminalRef):
        cat = catalogs[expr.name]
        total = sum(w for _, w in cat.entries)
        out = defaultdict(float)
        for words, w in cat.entries:
            out[tuple(words)] += w / total
        return dict(out)
    if isinstance(expr, Sequence):
        out = {(): 1.0}
        for item in expr.items:
            nxt = defaultdict(float)
            for a, p in out.items():
                for b, q in expand(item, rules, catalogs).items():
                    nxt[a + b] += p * q
            out = dict(nxt)
        return out
    if isinstance(expr, Alternation):
        ws = [w for _, w in expr.branches]
        explicit = [w for w in ws if w is not None]
        fill = sum(explicit) / len(explicit) if explicit else 1.0
        ws = [fill if w is None else w for w in ws]
        out = defaultdict(float)
        for (branch, _), w in zip(expr.branches, ws):
            for s, p in expand(branch, rules, catalogs).items():
                out[s] += p * w / sum(ws)
        return dict(out)
    if isinstance(expr, OptionalExpr):
        out = defaultdict(float)
        out[()] += 0.5
        for s, p in expand(expr.expr, rules, catalogs).items():
            out[s] += 0.5 * p
        return dict(out)
    raise TypeError(expr)


# --- parsing ----------------------------------------------------------------


def test_parse_cook_dish():
    ast, _ = cook_dish()
    assert list(ast.rules) == ["i_want_to", "action", "food_or_drink", "cook_dish"]
    assert ast.nonterminals() == {"DISH_NAME"}
    assert ast.rules["cook_dish"] == Sequence((RuleRef("i_want_to"), RuleRef("action"), RuleRef("food_or_drink")))


def test_bracketed_words_are_plain_literals():
    ast = parse_grammar('r = "[i] [want]";')
    assert ast.rules["r"] == Sequence((Literal("i"), Literal("want")))


def test_optional_forms_are_equivalent():
    a = parse_grammar('r = "x" ["y"];')
    b = parse_grammar('r = "x" "y"?;')
    assert a.rules == b.rules


def test_comments_and_whitespace():
    ast = parse_grammar('# header\nr =\n  "a"   # trailing\n  ;\n')
    assert ast.rules["r"] == Literal("a")


@pytest.mark.parametrize(
    "text, line, column",
    [
        ('r = "a"', 1, 8),
        ('r = ("a" | );', 1, 12),
        ('r = "a";\ns = "b" | ;', 2, 11),
        ('r = "a" : x;', 1, 11),
        ('r = "";', 1, 5),
        ('r = "a" @;', 1, 9),
    ],
)
def test_syntax_errors_report_position(text, line, column):
    with pytest.raises(GrammarSyntaxError) as e:
        parse_grammar(text)
    assert (e.value.line, e.value.column) == (line, column)


def test_duplicate_rule():
    with pytest.raises(DuplicateRule):
        parse_grammar('r = "a";\nr = "b";')


def test_unresolved_reference():
    with pytest.raises(UnresolvedReference):
        parse_grammar('r = s "a";')


def test_cyclic_reference():
    with pytest.raises(CyclicReference) as e:
        parse_grammar('r = s;\ns = ("a" | t);\nt = r;')
    assert "r -> s -> t -> r" in str(e.value)


def test_self_reference():
    with pytest.raises(CyclicReference):
        parse_grammar('r = ("a" | "b" r);')


# --- catalogs ---------------------------------------------------------------


def test_catalog_default_weight():
    cat = load_catalog(io.StringIO("pasta\npizza\t2.0\nice cream\n"), "DISH")
    assert cat.entries == ((("pasta",), 1.0), (("pizza",), 2.0), (("ice", "cream"), 1.0))


def test_empty_catalog():
    with pytest.raises(EmptyCatalog):
        load_catalog(io.StringIO("\n  \n"), "DISH")


@pytest.mark.parametrize("line", ["pasta\t-1", "pasta\tnan", "pasta\tabc", "pasta\t1\t2", "\t1"])
def test_bad_catalog_lines(line):
    with pytest.raises(CatalogError):
        load_catalog(io.StringIO(line + "\n"), "DISH")


def test_all_zero_catalog():
    with pytest.raises(CatalogError):
        load_catalog(io.StringIO("a\t0\nb\t0\n"), "DISH")


# --- compilation ------------------------------------------------------------


def test_branch_probabilities():
    assert branch_probabilities([None, None]) == [0.5, 0.5]
    assert branch_probabilities([2.0, 1.0, 1.0]) == [0.5, 0.25, 0.25]
    assert branch_probabilities([3.0, None]) == [0.5, 0.5]
    with pytest.raises(CompileError):
        branch_probabilities([0.0, 0.0])


def test_weighted_alternation():
    f = compile_grammar(parse_grammar('r = ("a":2 | "b" | "c":1);'), "r")
    dist = sentence_distribution(f)
    assert dist == pytest.approx({("a",): 2 / 4.5, ("b",): 1.5 / 4.5, ("c",): 1 / 4.5})


def test_weighted_alternation_half_quarter_quarter():
    f = compile_grammar(parse_grammar('r = ("a":2 | "b":1 | "c":1);'), "r")
    assert sentence_distribution(f) == pytest.approx({("a",): 0.5, ("b",): 0.25, ("c",): 0.25})


def test_compiled_mass_is_one():
    ast, cat = cook_dish()
    f = expand_nonterminals(compile_grammar(ast, "cook_dish"), [cat])
    assert forward_backward(f).z == pytest.approx(1.0, rel=1e-12)


def test_cook_dish_distribution():
    ast, cat = cook_dish()
    f = expand_nonterminals(compile_grammar(ast, "cook_dish"), [cat])
    dist = sentence_distribution(f)
    # 3 openers x 3 actions x 4 endings (food, none, pasta, pizza)
    assert len(dist) == 36
    assert dist[("i", "want", "to", "cook", "pizza")] == pytest.approx((1 / 3) * (1 / 3) * 0.5 * (2 / 3))
    assert dist[("i", "would", "like", "to", "bake")] == pytest.approx((1 / 3) * (1 / 3) * 0.5 * 0.5)


def test_keep_nonterminal_arcs():
    ast, _ = cook_dish()
    f = compile_grammar(ast, "cook_dish")
    assert f.nonterminals() == {"DISH_NAME"}


def test_unknown_root():
    ast, _ = cook_dish()
    with pytest.raises(CompileError):
        compile_grammar(ast, "nope")


def test_inline_missing_catalog():
    ast, _ = cook_dish()
    with pytest.raises(CompileError):
        compile_grammar(ast, "cook_dish", inline_catalogs=True)


def test_inline_matches_replace():
    ast, cat = cook_dish()
    a = sentence_distribution(compile_grammar(ast, "cook_dish", [cat], inline_catalogs=True))
    b = sentence_distribution(expand_nonterminals(compile_grammar(ast, "cook_dish"), [cat]))
    assert a.keys() == b.keys()
    assert all(math.isclose(a[k], b[k], rel_tol=1e-12) for k in a)


def test_compile_is_deterministic():
    ast, cat = cook_dish()
    assert compile_grammar(ast, "cook_dish") == compile_grammar(ast, "cook_dish")


def test_uniform_unweighted_paths():
    f = compile_grammar(parse_grammar('r = ("a" | "b" | "c" | "d");'), "r")
    assert all(w == pytest.approx(0.25) for _, w in enumerate_paths(f))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_random_grammars_match_ast_oracle(seed):
    text, catalogs = random_grammar(random.Random(seed))
    ast = parse_grammar(text)
    cats = {c.name: c for c in catalogs}
    want = expand(ast.rules["r0"], ast.rules, cats)
    got = sentence_distribution(expand_nonterminals(compile_grammar(ast, "r0"), catalogs))
    assert got.keys() == want.keys()
    assert all(math.isclose(got[k], want[k], rel_tol=1e-9) for k in want)
