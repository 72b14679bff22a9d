import io
import math
import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grammarlm.synthetic import random_acyclic_fst
from grammarlm.wfst import (
    CycleDetected,
    DeadEnd,
    DivergentMass,
    FstBuilder,
    FstError,
    MalformedFst,
    NonTerminal,
    RecursionDepthExceeded,
    UnboundNonTerminal,
    ZeroMass,
    enumerate_paths,
    forward_backward,
    is_acyclic,
    linear_fst,
    read_fst,
    replace,
    sample_path,
    sample_paths,
    sentence_distribution,
    topological_order,
    union_of_phrases,
    write_fst,
)


def path_mass(f):
    return math.fsum(w for _, w in enumerate_paths(f))


def diamond():
    b = FstBuilder()
    for _ in range(4):
        b.add_state()
    b.add_arc(0, "a", 0.5, 1)
    b.add_arc(0, "b", 0.5, 2)
    b.add_arc(1, "c", 1.0, 3)
    b.add_arc(2, "d", 1.0, 3)
    b.set_final(3)
    return b.build()


@st.composite
def acyclic_fsts(draw):
    seed = draw(st.integers(0, 10_000))
    n = draw(st.integers(2, 25))
    return random_acyclic_fst(random.Random(seed), num_states=n, max_paths=2000)


# --- construction -----------------------------------------------------------


def test_builder_rejects_negative_weight():
    b = FstBuilder()
    s = b.add_state()
    with pytest.raises(FstError):
        b.add_arc(s, "a", -0.1, s)


def test_builder_rejects_dangling_arc():
    b = FstBuilder()
    s = b.add_state()
    b.add_arc(s, "a", 1.0, 5)
    with pytest.raises(FstError):
        b.build()


def test_vocabulary_and_nonterminals():
    b = FstBuilder()
    s, t, u = b.add_state(), b.add_state(), b.add_state()
    b.add_arc(s, "x", 1.0, t)
    b.add_arc(t, NonTerminal("N"), 1.0, u)
    b.add_arc(s, None, 0.5, u)
    b.set_final(u)
    f = b.build()
    assert f.vocabulary() == {"x"}
    assert f.nonterminals() == {"N"}
    assert f.has_epsilons()


# --- topological order ------------------------------------------------------


def test_topological_order_linear():
    assert topological_order(linear_fst(["a", "b"])) == [0, 1, 2]


def test_topological_order_diamond():
    order = topological_order(diamond())
    assert order[0] == 0 and order[-1] == 3


def test_topological_order_self_loop():
    b = FstBuilder()
    s = b.add_state()
    b.add_arc(s, "a", 0.5, s)
    b.set_final(s)
    with pytest.raises(CycleDetected):
        topological_order(b.build())


@settings(max_examples=50, deadline=None)
@given(acyclic_fsts())
def test_topological_order_respects_arcs(f):
    pos = {s: i for i, s in enumerate(topological_order(f))}
    assert all(pos[s] < pos[a.next] for s, a in f.iter_arcs())


# --- forward-backward -------------------------------------------------------


def test_single_path_mass():
    fb = forward_backward(linear_fst(["a", "b"], [0.3, 1.0]))
    assert fb.z == pytest.approx(0.3, rel=1e-12)
    assert fb.beta[0] == pytest.approx(0.3, rel=1e-12)


def test_parallel_arcs_mass():
    b = FstBuilder()
    s, t = b.add_state(), b.add_state()
    b.add_arc(s, "a", 0.2, t)
    b.add_arc(s, "b", 0.6, t)
    b.set_final(t)
    assert forward_backward(b.build()).z == pytest.approx(0.8, rel=1e-12)


def test_zero_mass():
    b = FstBuilder()
    s, t = b.add_state(), b.add_state()
    b.add_arc(s, "a", 1.0, t)
    with pytest.raises(ZeroMass):
        forward_backward(b.build())


@settings(max_examples=60, deadline=None)
@given(acyclic_fsts())
def test_z_matches_enumeration(f):
    fb = forward_backward(f)
    assert math.isclose(fb.z, path_mass(f), rel_tol=1e-12)
    assert math.isclose(fb.beta[f.start], fb.z, rel_tol=1e-12)
    via_alpha = math.fsum(fb.alpha[s] * w for s, w in f.finals.items())
    assert math.isclose(via_alpha, fb.z, rel_tol=1e-12)


@settings(max_examples=40, deadline=None)
@given(acyclic_fsts())
def test_state_posteriors_are_probabilities(f):
    fb = forward_backward(f)
    for s in f.states():
        assert -1e-12 <= fb.posterior(s) <= 1 + 1e-12


@settings(max_examples=40, deadline=None)
@given(acyclic_fsts())
def test_arc_posteriors_over_a_cut_sum_to_one(f):
    # the arcs leaving the start state (plus stopping there) form a cut
    fb = forward_backward(f)
    s = f.start
    mass = f.final_weight(s) + math.fsum(a.weight * fb.beta[a.next] for a in f.arcs[s])
    assert math.isclose(mass / fb.z, 1.0, rel_tol=1e-12)


@settings(max_examples=30, deadline=None)
@given(acyclic_fsts(), st.floats(0.1, 10.0))
def test_final_weight_scaling_leaves_distribution(f, k):
    b = FstBuilder()
    for _ in f.states():
        b.add_state()
    b.start = f.start
    for s, a in f.iter_arcs():
        b.add_arc(s, a.label, a.weight, a.next)
    for s, w in f.finals.items():
        b.set_final(s, w * k)
    g = b.build()
    p, q = sentence_distribution(f), sentence_distribution(g)
    assert p.keys() == q.keys()
    assert all(math.isclose(p[x], q[x], rel_tol=1e-9) for x in p)


def test_cyclic_geometric_mass():
    # start --a/0.5--> start, final 1: Z = 1 / (1 - 0.5) = 2
    b = FstBuilder()
    s = b.add_state()
    b.add_arc(s, "a", 0.5, s)
    b.set_final(s)
    fb = forward_backward(b.build())
    assert fb.z == pytest.approx(2.0, rel=1e-10)


def test_cyclic_divergent():
    b = FstBuilder()
    s = b.add_state()
    b.add_arc(s, "a", 1.0, s)
    b.set_final(s)
    with pytest.raises(DivergentMass):
        forward_backward(b.build())


def test_cyclic_two_state_loop():
    # 0 -a/1-> 1 (final 0.5), 1 -b/0.5-> 0. Z = 0.5 * sum_k 0.5^k = 1
    b = FstBuilder()
    s, t = b.add_state(), b.add_state()
    b.add_arc(s, "a", 1.0, t)
    b.add_arc(t, "b", 0.5, s)
    b.set_final(t, 0.5)
    f = b.build()
    assert not is_acyclic(f)
    fb = forward_backward(f)
    assert fb.z == pytest.approx(1.0, rel=1e-10)
    assert fb.beta[f.start] == pytest.approx(fb.z, rel=1e-12)


# --- replace ----------------------------------------------------------------


def nt_root(weight=0.5):
    b = FstBuilder()
    s, t, u = b.add_state(), b.add_state(), b.add_state()
    b.add_arc(s, "x", 1.0, t)
    b.add_arc(t, NonTerminal("N"), weight, u)
    b.set_final(u)
    return b.build()


def test_replace_without_nonterminals_is_identity():
    f = diamond()
    assert replace(f, {}) == f


def test_replace_multiplies_weights():
    sub = union_of_phrases([(("p",), 1.0), (("q", "r"), 1.0)])
    g = replace(nt_root(0.5), {"N": sub})
    paths = dict(enumerate_paths(g))
    assert paths == pytest.approx({("x", "p"): 0.25, ("x", "q", "r"): 0.25})
    assert not g.nonterminals()


def test_replace_preserves_mass_with_unnormalized_binding():
    sub = linear_fst(["p"], [0.3])
    g = replace(nt_root(0.5), {"N": sub})
    assert forward_backward(g).z == pytest.approx(0.5 * 0.3, rel=1e-12)


def test_replace_unbound():
    with pytest.raises(UnboundNonTerminal) as e:
        replace(nt_root(), {})
    assert e.value.name == "N"


def test_replace_recursion_limit():
    b = FstBuilder()
    s, t = b.add_state(), b.add_state()
    b.add_arc(s, "a", 0.5, t)
    b.add_arc(s, NonTerminal("N"), 0.5, t)
    b.set_final(t)
    rec = b.build()
    with pytest.raises(RecursionDepthExceeded):
        replace(rec, {"N": rec}, max_depth=4)


def test_replace_nested_bindings():
    inner = union_of_phrases([(("i1",), 1.0), (("i2",), 3.0)])
    b = FstBuilder()
    s, t = b.add_state(), b.add_state()
    b.add_arc(s, "m", 1.0, t)
    b.add_arc(s, NonTerminal("I"), 1.0, t)
    b.set_final(t)
    mid = b.build()
    g = replace(nt_root(1.0), {"N": mid, "I": inner})
    dist = sentence_distribution(g)
    assert dist == pytest.approx({("x", "m"): 0.5, ("x", "i1"): 0.125, ("x", "i2"): 0.375})


# --- sampling ---------------------------------------------------------------


def test_sample_single_path():
    f = linear_fst(["a", "b", "c"])
    assert all(s == ["a", "b", "c"] for s in sample_paths(f, 20, 3))


def test_sample_determinism():
    f = diamond()
    assert sample_paths(f, 50, 11) == sample_paths(f, 50, 11)
    assert sample_path(f, 5) == sample_path(f, 5)


def test_sample_frequencies_binomial():
    f = diamond()
    n = 100_000
    counts = Counter(tuple(s) for s in sample_paths(f, n, 2024))
    sd = math.sqrt(n * 0.25)
    assert abs(counts[("a", "c")] - n / 2) < 3 * sd


def test_sample_matches_distribution_on_random_fst():
    f = random_acyclic_fst(random.Random(7), num_states=12, max_paths=200)
    dist = sentence_distribution(f)
    n = 50_000
    counts = Counter(tuple(s) for s in sample_paths(f, n, 1))
    for sent, p in dist.items():
        assert abs(counts[sent] - n * p) <= 4 * math.sqrt(n * p * (1 - p)) + 1


def test_sample_dead_end():
    b = FstBuilder()
    s, t = b.add_state(), b.add_state()
    b.add_arc(s, "a", 1.0, t)
    with pytest.raises((DeadEnd, ZeroMass)):
        sample_path(b.build(), 0)


# --- text format ------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(acyclic_fsts())
def test_text_roundtrip(f):
    buf = io.StringIO()
    write_fst(f, buf)
    g = read_fst(io.StringIO(buf.getvalue()))
    assert sentence_distribution(g) == pytest.approx(sentence_distribution(f), rel=1e-12)
    again = io.StringIO()
    write_fst(g, again)
    assert again.getvalue() == buf.getvalue()


def test_text_nonterminal_and_epsilon_labels():
    b = FstBuilder()
    s, t, u = b.add_state(), b.add_state(), b.add_state()
    b.add_arc(s, None, 0.5, t)
    b.add_arc(t, NonTerminal("DISH"), 1.0, u)
    b.set_final(u, 0.25)
    buf = io.StringIO()
    write_fst(b.build(), buf)
    assert "<eps>" in buf.getvalue() and "$DISH" in buf.getvalue()
    g = read_fst(io.StringIO(buf.getvalue()))
    assert g.nonterminals() == {"DISH"} and g.has_epsilons()
    assert g.final_weight(2) == 0.25


def test_read_malformed():
    with pytest.raises(MalformedFst):
        read_fst(io.StringIO("0 1 a\n"))
    with pytest.raises(MalformedFst):
        read_fst(io.StringIO(""))
