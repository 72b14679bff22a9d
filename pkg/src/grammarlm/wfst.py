"""Weighted acceptors: replacement, topological order, forward-backward, sampling.

Arc labels are plain strings for words, ``None`` for epsilon and
:class:`NonTerminal` instances for unexpanded non-terminals. Weights are
unnormalized nonnegative reals; path probabilities are always obtained by
dividing by the total mass ``z``.
"""

from __future__ import annotations

import bisect
import math
import random
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence, TextIO, Union

import numpy as np
from scipy import sparse

EPSILON = None
EPS_SYMBOL = "<eps>"

CONVERGENCE_TOL = 1e-12
MAX_ITERATIONS = 10_000
DEFAULT_MAX_DEPTH = 16


class FstError(Exception):
    pass


class CycleDetected(FstError):
    pass


class DivergentMass(FstError):
    pass


class ZeroMass(FstError):
    pass


class UnboundNonTerminal(FstError):
    def __init__(self, name: str):
        super().__init__(f"no binding for non-terminal {name!r}")
        self.name = name


class RecursionDepthExceeded(FstError):
    pass


class MalformedFst(FstError):
    pass


class DeadEnd(FstError):
    pass


@dataclass(frozen=True, order=True)
class NonTerminal:
    name: str

    def __str__(self) -> str:
        return "$" + self.name


Label = Union[str, None, NonTerminal]


class Arc(NamedTuple):
    label: Label
    weight: float
    next: int


@dataclass(frozen=True)
class WeightedFst:
    start: int
    finals: Mapping[int, float]
    arcs: tuple[tuple[Arc, ...], ...]

    @property
    def num_states(self) -> int:
        return len(self.arcs)

    def states(self) -> range:
        return range(len(self.arcs))

    def final_weight(self, state: int) -> float:
        return self.finals.get(state, 0.0)

    def iter_arcs(self) -> Iterator[tuple[int, Arc]]:
        for s, arcs in enumerate(self.arcs):
            for arc in arcs:
                yield s, arc

    def nonterminals(self) -> set[str]:
        return {a.label.name for _, a in self.iter_arcs() if isinstance(a.label, NonTerminal)}

    def has_epsilons(self) -> bool:
        return any(a.label is None for _, a in self.iter_arcs())

    def vocabulary(self) -> set[str]:
        return {a.label for _, a in self.iter_arcs() if isinstance(a.label, str)}


class FstBuilder:
    """Mutable accumulator that produces an immutable :class:`WeightedFst`."""

    def __init__(self) -> None:
        self._arcs: list[list[Arc]] = []
        self._finals: dict[int, float] = {}
        self.start = 0

    @property
    def num_states(self) -> int:
        return len(self._arcs)

    def add_state(self) -> int:
        self._arcs.append([])
        return len(self._arcs) - 1

    def add_arc(self, src: int, label: Label, weight: float, dst: int) -> None:
        if weight < 0 or math.isnan(weight):
            raise FstError(f"arc weight must be >= 0, got {weight}")
        self._arcs[src].append(Arc(label, float(weight), dst))

    def set_final(self, state: int, weight: float = 1.0) -> None:
        if weight < 0:
            raise FstError(f"final weight must be >= 0, got {weight}")
        self._finals[state] = float(weight)

    def build(self) -> WeightedFst:
        n = len(self._arcs)
        if not 0 <= self.start < n:
            raise FstError("start state out of range")
        for src, arcs in enumerate(self._arcs):
            for arc in arcs:
                if not 0 <= arc.next < n:
                    raise FstError(f"arc {src}->{arc.next} points outside the state set")
        return WeightedFst(
            start=self.start,
            finals=dict(sorted(self._finals.items())),
            arcs=tuple(tuple(a) for a in self._arcs),
        )


def linear_fst(words: Sequence[str], weights: Sequence[float] | None = None) -> WeightedFst:
    b = FstBuilder()
    s = b.add_state()
    for i, w in enumerate(words):
        t = b.add_state()
        b.add_arc(s, w, 1.0 if weights is None else weights[i], t)
        s = t
    b.set_final(s)
    return b.build()


def union_of_phrases(phrases: Iterable[tuple[Sequence[str], float]]) -> WeightedFst:
    """Acceptor whose paths are ``phrases``, each weighted by its normalized weight."""
    phrases = list(phrases)
    total = sum(w for _, w in phrases)
    if total <= 0:
        raise ZeroMass("phrase weights sum to zero")
    b = FstBuilder()
    start = b.add_state()
    end = b.add_state()
    b.set_final(end)
    for words, w in phrases:
        if w == 0:
            continue
        p = w / total
        if not words:
            b.add_arc(start, EPSILON, p, end)
            continue
        s = start
        for i, word in enumerate(words):
            t = end if i == len(words) - 1 else b.add_state()
            b.add_arc(s, word, p if i == 0 else 1.0, t)
            s = t
    return b.build()


# ---------------------------------------------------------------------------
# replacement


def replace(
    root: WeightedFst,
    bindings: Mapping[str, WeightedFst],
    max_depth: int = DEFAULT_MAX_DEPTH,
) -> WeightedFst:
    """Splice bound FSTs in place of non-terminal arcs.

    A non-terminal arc ``s --X/w--> t`` becomes ``s --eps/w--> copy.start``
    and ``f --eps/final(f)--> t`` for each final ``f`` of the copy, so every
    expanded path keeps the product of the original weights.
    """
    if max_depth < 1:
        raise ValueError("max_depth must be positive")
    if not root.nonterminals():
        return root
    b = FstBuilder()
    b.start = _splice(b, root, bindings, depth=0, max_depth=max_depth, exits=None)
    return b.build()


def _splice(b, fst, bindings, depth, max_depth, exits):
    # exits is None for the root (keep final weights) or the target state that
    # finals of this copy must connect to.
    offset = b.num_states
    for _ in fst.states():
        b.add_state()
    for s, arc in fst.iter_arcs():
        src = offset + s
        dst = offset + arc.next
        if isinstance(arc.label, NonTerminal):
            name = arc.label.name
            if name not in bindings:
                raise UnboundNonTerminal(name)
            if depth + 1 > max_depth:
                raise RecursionDepthExceeded(
                    f"non-terminal {name!r} still unexpanded at depth {max_depth}"
                )
            sub_start = _splice(b, bindings[name], bindings, depth + 1, max_depth, exits=dst)
            b.add_arc(src, EPSILON, arc.weight, sub_start)
        else:
            b.add_arc(src, arc.label, arc.weight, dst)
    for f, w in fst.finals.items():
        if exits is None:
            b.set_final(offset + f, w)
        elif w > 0:
            b.add_arc(offset + f, EPSILON, w, exits)
    return offset + fst.start


# ---------------------------------------------------------------------------
# ordering and path mass


def topological_order(f: WeightedFst) -> list[int]:
    """Kahn's algorithm over all states; raises :class:`CycleDetected`."""
    indeg = [0] * f.num_states
    for _, arc in f.iter_arcs():
        indeg[arc.next] += 1
    # stable: lowest-numbered ready state first
    ready = deque(s for s in f.states() if indeg[s] == 0)
    order = []
    while ready:
        s = ready.popleft()
        order.append(s)
        for arc in f.arcs[s]:
            indeg[arc.next] -= 1
            if indeg[arc.next] == 0:
                ready.append(arc.next)
    if len(order) != f.num_states:
        raise CycleDetected("FST contains a cycle")
    return order


def is_acyclic(f: WeightedFst) -> bool:
    try:
        topological_order(f)
    except CycleDetected:
        return False
    return True


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def _logaddexp(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


@dataclass(frozen=True)
class ForwardBackwardTables:
    """Per-state forward/backward path mass, stored as natural logs."""

    log_alpha: np.ndarray
    log_beta: np.ndarray
    log_z: float

    @property
    def alpha(self) -> np.ndarray:
        return np.exp(self.log_alpha)

    @property
    def beta(self) -> np.ndarray:
        return np.exp(self.log_beta)

    @property
    def z(self) -> float:
        return math.exp(self.log_z)

    def posterior(self, state: int) -> float:
        return math.exp(self.log_alpha[state] + self.log_beta[state] - self.log_z)


def forward_backward(f: WeightedFst) -> ForwardBackwardTables:
    if f.nonterminals():
        raise FstError("forward_backward needs a non-terminal-free FST")
    try:
        order = topological_order(f)
    except CycleDetected:
        return _forward_backward_fixpoint(f)

    n = f.num_states
    la = np.full(n, -math.inf)
    lb = np.full(n, -math.inf)
    la[f.start] = 0.0
    for s in order:
        if la[s] == -math.inf:
            continue
        for arc in f.arcs[s]:
            la[arc.next] = _logaddexp(la[arc.next], la[s] + _log(arc.weight))
    for s in reversed(order):
        acc = _log(f.final_weight(s))
        for arc in f.arcs[s]:
            acc = _logaddexp(acc, _log(arc.weight) + lb[arc.next])
        lb[s] = acc
    log_z = float(lb[f.start])
    if log_z == -math.inf:
        raise ZeroMass("FST has no complete path with positive weight")
    return ForwardBackwardTables(la, lb, log_z)


def _forward_backward_fixpoint(f: WeightedFst) -> ForwardBackwardTables:
    """Power iteration for cyclic FSTs: alpha = e_start + A^T alpha, beta = rho + A beta."""
    n = f.num_states
    rows, cols, vals = [], [], []
    for s, arc in f.iter_arcs():
        rows.append(s)
        cols.append(arc.next)
        vals.append(arc.weight)
    a = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    at = a.T.tocsr()
    seed = np.zeros(n)
    seed[f.start] = 1.0
    rho = np.zeros(n)
    for s, w in f.finals.items():
        rho[s] = w

    def solve(mat, b):
        x = b.copy()
        for _ in range(MAX_ITERATIONS):
            nxt = b + mat @ x
            if not np.all(np.isfinite(nxt)):
                raise DivergentMass("path mass diverges (cycle weight >= 1)")
            delta = np.max(np.abs(nxt - x) / np.maximum(np.abs(nxt), 1e-300))
            x = nxt
            if delta < CONVERGENCE_TOL:
                return x
        raise DivergentMass(f"forward-backward did not converge in {MAX_ITERATIONS} iterations")

    alpha = solve(at, seed)
    beta = solve(a, rho)
    if beta[f.start] <= 0:
        raise ZeroMass("FST has no complete path with positive weight")
    with np.errstate(divide="ignore"):
        return ForwardBackwardTables(np.log(alpha), np.log(beta), float(np.log(beta[f.start])))


# ---------------------------------------------------------------------------
# enumeration and sampling


def enumerate_paths(f: WeightedFst, cap: int = 1_000_000) -> Iterator[tuple[tuple[str, ...], float]]:
    """Yield (words, unnormalized weight) for every complete path of an acyclic FST."""
    topological_order(f)
    count = 0
    stack: list[tuple[int, tuple[str, ...], float]] = [(f.start, (), 1.0)]
    while stack:
        s, words, w = stack.pop()
        fw = f.final_weight(s)
        if fw > 0:
            count += 1
            if count > cap:
                raise FstError(f"more than {cap} paths")
            yield words, w * fw
        for arc in reversed(f.arcs[s]):
            if arc.weight == 0:
                continue
            if isinstance(arc.label, NonTerminal):
                raise FstError("cannot enumerate paths through non-terminal arcs")
            nxt = words if arc.label is None else words + (arc.label,)
            stack.append((arc.next, nxt, w * arc.weight))


def sentence_distribution(f: WeightedFst, cap: int = 1_000_000) -> dict[tuple[str, ...], float]:
    """Normalized probability of each distinct word sequence (paths merged)."""
    dist: dict[tuple[str, ...], float] = {}
    for words, w in enumerate_paths(f, cap):
        dist[words] = dist.get(words, 0.0) + w
    z = sum(dist.values())
    if z <= 0:
        raise ZeroMass("FST has no complete path with positive weight")
    return {k: v / z for k, v in dist.items()}


class PathSampler:
    """Draws complete paths with probability proportional to their weight.

    At each state the next arc (or stopping) is chosen with probability
    ``c_arc * beta[next] / beta[state]`` (``final / beta[state]`` to stop),
    which reproduces the global path distribution exactly.
    """

    def __init__(self, f: WeightedFst):
        if f.nonterminals():
            raise FstError("sampling needs a non-terminal-free FST")
        self.fst = f
        fb = forward_backward(f)
        lb = fb.log_beta
        self._choices: list[list[Arc | None]] = []
        self._cdf: list[list[float]] = []
        for s in f.states():
            choices: list[Arc | None] = []
            probs: list[float] = []
            if lb[s] != -math.inf:
                fw = f.final_weight(s)
                if fw > 0:
                    choices.append(None)
                    probs.append(math.exp(_log(fw) - lb[s]))
                for arc in f.arcs[s]:
                    if arc.weight > 0 and lb[arc.next] != -math.inf:
                        choices.append(arc)
                        probs.append(math.exp(_log(arc.weight) + lb[arc.next] - lb[s]))
            cdf = list(np.cumsum(probs)) if probs else []
            self._choices.append(choices)
            self._cdf.append(cdf)

    def sample(self, rng: random.Random) -> list[str]:
        s = self.fst.start
        words: list[str] = []
        while True:
            cdf = self._cdf[s]
            if not cdf:
                raise DeadEnd(f"state {s} has no continuation mass")
            i = bisect.bisect_right(cdf, rng.random() * cdf[-1])
            choice = self._choices[s][min(i, len(cdf) - 1)]
            if choice is None:
                return words
            if choice.label is not None:
                words.append(choice.label)
            s = choice.next


def _as_rng(seed: int | random.Random) -> random.Random:
    return seed if isinstance(seed, random.Random) else random.Random(seed)


def sample_path(f: WeightedFst, rng_seed: int | random.Random) -> list[str]:
    return PathSampler(f).sample(_as_rng(rng_seed))


def sample_paths(f: WeightedFst, n: int, seed: int | random.Random) -> list[list[str]]:
    sampler = PathSampler(f)
    rng = _as_rng(seed)
    return [sampler.sample(rng) for _ in range(n)]


# ---------------------------------------------------------------------------
# text format


def _label_str(label: Label) -> str:
    if label is None:
        return EPS_SYMBOL
    return str(label)


def _parse_label(tok: str) -> Label:
    if tok == EPS_SYMBOL:
        return EPSILON
    if tok.startswith("$") and len(tok) > 1:
        return NonTerminal(tok[1:])
    return tok


def write_fst(f: WeightedFst, out: TextIO) -> None:
    """AT&T-style dump; the start state's lines come first."""
    order = [f.start] + [s for s in f.states() if s != f.start]
    for s in order:
        for arc in f.arcs[s]:
            out.write(f"{s}\t{arc.next}\t{_label_str(arc.label)}\t{arc.weight!r}\n")
        if s in f.finals:
            out.write(f"{s}\t{f.finals[s]!r}\n")


def read_fst(stream: TextIO) -> WeightedFst:
    entries = []
    n = 0
    for lineno, line in enumerate(stream, 1):
        fields = line.split()
        if not fields:
            continue
        try:
            if len(fields) == 4:
                src, dst, w = int(fields[0]), int(fields[1]), float(fields[3])
                entries.append((src, dst, _parse_label(fields[2]), w))
                n = max(n, src + 1, dst + 1)
            elif len(fields) in (1, 2):
                s = int(fields[0])
                w = float(fields[1]) if len(fields) == 2 else 1.0
                entries.append((s, None, None, w))
                n = max(n, s + 1)
            else:
                raise ValueError
        except ValueError:
            raise MalformedFst(f"line {lineno}: malformed FST line {line.rstrip()!r}") from None
    if not entries:
        raise MalformedFst("empty FST file")
    b = FstBuilder()
    for _ in range(n):
        b.add_state()
    b.start = entries[0][0]
    for src, dst, label, w in entries:
        if dst is None:
            b.set_final(src, w)
        else:
            b.add_arc(src, label, w, dst)
    return b.build()
