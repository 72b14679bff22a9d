import io
import math
import random
from collections import defaultdict
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grammarlm.counts import (
    BOS,
    EOS,
    NO_PRUNING,
    CountError,
    ExpectedCounts,
    MalformedCounts,
    PruneConfig,
    brute_force_counts,
    counts_from_corpus,
    expected_counts,
    limit_new_vocabulary,
    read_counts,
    scale_counts,
    write_counts,
)
from grammarlm.grammar import compile_grammar, expand_nonterminals, load_catalog, parse_grammar
from grammarlm.synthetic import random_acyclic_fst, random_grammar_fst
from grammarlm.wfst import FstBuilder, NonTerminal, enumerate_paths, linear_fst, sample_paths

DATA = Path(__file__).parent / "data"


def close_tables(a, b, tol=1e-9):
    keys = set(a) | set(b)
    return all(abs(a.get(k, 0.0) - b.get(k, 0.0)) <= tol for k in keys)


def branch_fst():
    # "a" then {"b": 0.5, "c": 0.5}
    b = FstBuilder()
    s, t, u = b.add_state(), b.add_state(), b.add_state()
    b.add_arc(s, "a", 1.0, t)
    b.add_arc(t, "b", 0.5, u)
    b.add_arc(t, "c", 0.5, u)
    b.set_final(u)
    return b.build()


def hand_enumerate(paths, order, boundaries=True):
    """Counts from an explicit list of (sentence, unnormalized weight)."""
    z = sum(w for _, w in paths)
    out = defaultdict(float)
    for words, w in paths:
        seq = ([BOS] if boundaries else []) + list(words) + ([EOS] if boundaries else [])
        for n in range(1, order + 1):
            for i in range(len(seq) - n + 1):
                out[tuple(seq[i:i + n])] += w / z
    return dict(out)


@st.composite
def small_fsts(draw):
    rng = random.Random(draw(st.integers(0, 10**6)))
    if draw(st.booleans()):
        return random_grammar_fst(rng, max_paths=2000)
    return random_acyclic_fst(rng, num_states=draw(st.integers(2, 15)), max_paths=2000)


# --- worked examples --------------------------------------------------------


def test_single_path_order2():
    c = expected_counts(linear_fst(["a", "b"]), 2, prune=NO_PRUNING)
    assert c[(BOS, "a")] == c[("a", "b")] == c[("b", EOS)] == 1.0
    assert c[("a",)] == c[("b",)] == 1.0
    bigrams = {g for g in c.table if len(g) == 2}
    assert bigrams == {(BOS, "a"), ("a", "b"), ("b", EOS)}


def test_branch_without_boundaries():
    c = expected_counts(branch_fst(), 2, boundaries=False, prune=NO_PRUNING)
    assert c.table == pytest.approx(
        {("a",): 1.0, ("b",): 0.5, ("c",): 0.5, ("a", "b"): 0.5, ("a", "c"): 0.5}
    )


def test_repeated_ngram_counts_multiplicity():
    c = expected_counts(linear_fst(["a", "a", "a"]), 2, boundaries=False, prune=NO_PRUNING)
    assert c[("a",)] == 3.0
    assert c[("a", "a")] == 2.0


def test_cook_dish_matches_brute_force():
    ast = parse_grammar((DATA / "cook_dish.grm").read_text())
    cat = load_catalog(io.StringIO("pasta\npizza\nsoup\n"), "DISH_NAME")
    f = expand_nonterminals(compile_grammar(ast, "cook_dish"), [cat])
    got = expected_counts(f, 3, prune=NO_PRUNING).table
    want = brute_force_counts(f, 3).table
    assert close_tables(got, want)


@pytest.mark.parametrize(
    "paths",
    [
        [(("x", "y"), 2.0), (("x",), 1.0), (("y", "y", "x"), 1.0)],
        [(("a", "b", "a", "b"), 0.3), (("b",), 0.7)],
        [(("p",), 1.0), (("p", "q"), 1.0), (("p", "q", "r"), 2.0)],
    ],
)
def test_fixed_instances_against_hand_enumeration(paths):
    # build as a union of linear branches sharing start and final states
    b = FstBuilder()
    start, end = b.add_state(), b.add_state()
    b.set_final(end)
    for words, w in paths:
        s = start
        for i, word in enumerate(words):
            t = end if i == len(words) - 1 else b.add_state()
            b.add_arc(s, word, w if i == 0 else 1.0, t)
            s = t
    f = b.build()
    want = hand_enumerate(paths, 3)
    assert close_tables(expected_counts(f, 3, prune=NO_PRUNING).table, want)
    assert close_tables(brute_force_counts(f, 3).table, want)


def test_epsilon_arcs_pass_through():
    b = FstBuilder()
    s, t, u = b.add_state(), b.add_state(), b.add_state()
    b.add_arc(s, "a", 1.0, t)
    b.add_arc(t, None, 0.5, u)
    b.add_arc(t, "b", 0.5, u)
    b.set_final(u)
    c = expected_counts(b.build(), 2, prune=NO_PRUNING)
    assert c[("a", EOS)] == pytest.approx(0.5)
    assert c[("a", "b")] == pytest.approx(0.5)


def test_errors():
    with pytest.raises(CountError):
        expected_counts(linear_fst(["a"]), 0)
    b = FstBuilder()
    s, t = b.add_state(), b.add_state()
    b.add_arc(s, NonTerminal("N"), 1.0, t)
    b.set_final(t)
    with pytest.raises(CountError):
        expected_counts(b.build(), 2)


def test_cyclic_needs_pruning():
    b = FstBuilder()
    s = b.add_state()
    b.add_arc(s, "a", 0.5, s)
    b.set_final(s)
    f = b.build()
    with pytest.raises(CountError):
        expected_counts(f, 2, prune=NO_PRUNING)
    # geometric length: E[#a] = 0.5 / 0.5 = 1
    c = expected_counts(f, 1, prune=PruneConfig(1e-12))
    assert c[("a",)] == pytest.approx(1.0, abs=1e-9)


# --- properties -------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(small_fsts(), st.integers(1, 4), st.booleans())
def test_matches_brute_force(f, order, boundaries):
    got = expected_counts(f, order, boundaries, NO_PRUNING).table
    want = brute_force_counts(f, order, boundaries).table
    assert close_tables(got, want)


@settings(max_examples=30, deadline=None)
@given(small_fsts())
def test_order_consistency(f):
    c = expected_counts(f, 3, prune=NO_PRUNING)
    ext = defaultdict(float)
    for g, v in c.table.items():
        if len(g) >= 2:
            ext[g[:-1]] += v
    for h, total in ext.items():
        assert total <= c[h] + 1e-9


@settings(max_examples=30, deadline=None)
@given(small_fsts())
def test_unigram_mass_is_expected_length(f):
    c = brute_force_counts(f, 1, boundaries=False)
    paths = list(enumerate_paths(f))
    z = math.fsum(w for _, w in paths)
    length = math.fsum(w / z * len(s) for s, w in paths)
    got = expected_counts(f, 1, boundaries=False, prune=NO_PRUNING).unigram_mass()
    assert got == pytest.approx(length, rel=1e-9)
    assert c.unigram_mass() == pytest.approx(length, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(small_fsts(), st.floats(1e-6, 1e-2), st.floats(1.0, 100.0))
def test_pruning_monotone(f, lo, factor):
    a = expected_counts(f, 3, prune=PruneConfig(lo)).table
    b = expected_counts(f, 3, prune=PruneConfig(lo * factor)).table
    assert set(b) <= set(a)
    assert all(b[g] <= a[g] + 1e-12 for g in b)


def test_sampling_consistency():
    f = random_grammar_fst(random.Random(3), max_paths=500)
    exact = expected_counts(f, 2, prune=NO_PRUNING).table
    n = 100_000
    sampled = counts_from_corpus(sample_paths(f, n, 9), 2)
    assert set(sampled) <= set(exact)
    for g, c in exact.items():
        assert abs(sampled.get(g, 0) / n - c) <= 3 * math.sqrt(c / n) + 1e-9


# --- scaling ----------------------------------------------------------------


def test_scale_counts_examples():
    s = scale_counts({("a",): 0.5, ("b",): 0.5}, 10)
    assert s.counts == {("a",): 5, ("b",): 5} and s.scale == 10
    s = scale_counts({("a",): 0.9, ("b",): 0.1}, 10)
    assert s.counts == {("a",): 9, ("b",): 1}
    table = {("a",): 3.0, ("b",): 2.0, ("a", "b"): 1.0}
    assert scale_counts(table, 5).counts == {g: int(v) for g, v in table.items()}


def test_scale_counts_drops_zeros():
    s = scale_counts({("a",): 1.0, ("a", "b"): 1e-9}, 10)
    assert ("a", "b") not in s.counts


def test_scale_counts_errors():
    with pytest.raises(CountError):
        scale_counts({}, 10)
    with pytest.raises(CountError):
        scale_counts({("a",): 1.0}, 0)
    with pytest.raises(CountError):
        scale_counts({("a",): 1.0, ("b",): 1e6}, 1e-9)


def test_limit_new_vocabulary():
    c = ExpectedCounts(2, {("k",): 5.0, ("x",): 3.0, ("y",): 1.0, ("x", "y"): 1.0, ("k", "x"): 2.0})
    out = limit_new_vocabulary(c, {"k"}, max_new=1)
    assert out.table == {("k",): 5.0, ("x",): 3.0, ("k", "x"): 2.0}


# --- file format ------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(small_fsts())
def test_counts_file_roundtrip(f):
    c = expected_counts(f, 3, prune=NO_PRUNING)
    buf = io.StringIO()
    write_counts(c.table, buf)
    back = read_counts(io.StringIO(buf.getvalue()))
    assert back.table == c.table
    lines = buf.getvalue().splitlines()
    assert lines == sorted(lines, key=lambda l: tuple(l.split("\t")[0].split()))


def test_counts_file_single_path():
    buf = io.StringIO()
    write_counts(expected_counts(linear_fst(["a", "b"]), 2).table, buf)
    bigrams = [l for l in buf.getvalue().splitlines() if len(l.split("\t")[0].split()) == 2]
    assert bigrams == ["<s> a\t1.0", "a b\t1.0", "b </s>\t1.0"]


@pytest.mark.parametrize("text", ["", "a b\n", "a\tx\n", "a\t-1\n", "\t1\n"])
def test_malformed_counts(text):
    with pytest.raises(MalformedCounts):
        read_counts(io.StringIO(text))
