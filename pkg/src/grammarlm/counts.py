"""Expected n-gram counts of the sentence distribution defined by an FST.

The dynamic program carries, for every state, a map from the last ``n-1``
words of a partial path to the posterior mass of all arc sequences that
realize it. Leaving a state along an arc with weight ``c`` multiplies that
mass by ``c * beta[next] / beta[state]``; stopping multiplies it by
``final / beta[state]``. Each extension contributes its mass to every
suffix n-gram it completes, so an n-gram that occurs twice on a path is
counted twice.
"""

from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, TextIO

from .wfst import (
    CycleDetected,
    WeightedFst,
    enumerate_paths,
    forward_backward,
    topological_order,
)

BOS = "<s>"
EOS = "</s>"

DEFAULT_PRUNE_THRESHOLD = 1e-8
DEFAULT_TARGET_MASS = 1e6
DEFAULT_PATH_CAP = 1_000_000

NGram = tuple[str, ...]


class CountError(Exception):
    pass


class MalformedCounts(CountError):
    pass


@dataclass(frozen=True)
class PruneConfig:
    threshold: float = DEFAULT_PRUNE_THRESHOLD
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.threshold < 0:
            raise ValueError("prune threshold must be >= 0")

    @property
    def cutoff(self) -> float:
        return self.threshold if self.enabled else 0.0


NO_PRUNING = PruneConfig(0.0, enabled=False)


@dataclass
class ExpectedCounts:
    order: int
    table: dict[NGram, float] = field(default_factory=dict)

    @property
    def total_mass_by_order(self) -> dict[int, float]:
        mass: dict[int, float] = {}
        for g, c in self.table.items():
            mass[len(g)] = mass.get(len(g), 0.0) + c
        return dict(sorted(mass.items()))

    def unigram_mass(self) -> float:
        return sum(c for g, c in self.table.items() if len(g) == 1)

    def __getitem__(self, ngram: NGram) -> float:
        return self.table.get(tuple(ngram), 0.0)

    def __len__(self) -> int:
        return len(self.table)


def _add_suffixes(table: dict, ctx: NGram, mass: float) -> None:
    for i in range(len(ctx)):
        g = ctx[i:]
        table[g] = table.get(g, 0.0) + mass


def expected_counts(
    f: WeightedFst,
    order: int,
    boundaries: bool = True,
    prune: PruneConfig = PruneConfig(),
) -> ExpectedCounts:
    if order < 1:
        raise CountError("order must be >= 1")
    if f.nonterminals():
        raise CountError("expand non-terminals before counting")
    fb = forward_backward(f)
    lb = fb.log_beta
    cutoff = prune.cutoff
    keep = order - 1
    table: dict[NGram, float] = {}

    try:
        topo = topological_order(f)
    except CycleDetected:
        if cutoff <= 0:
            raise CountError("cyclic FSTs need a positive prune threshold") from None
        topo = None

    pending: dict[int, dict[NGram, float]] = defaultdict(dict)
    if boundaries:
        table[(BOS,)] = 1.0
        pending[f.start][(BOS,)[-keep:] if keep else ()] = 1.0
    else:
        pending[f.start][()] = 1.0

    # Acyclic: one visit per state in topological order. Cyclic: worklist,
    # which terminates because pruning drops mass that keeps circulating.
    agenda: deque[int] = deque(topo if topo is not None else [f.start])
    queued = set(agenda)
    while agenda:
        s = agenda.popleft()
        queued.discard(s)
        tokens = pending.pop(s, None)
        if not tokens or lb[s] == -math.inf:
            continue
        if cutoff > 0:
            tokens = {h: m for h, m in tokens.items() if m >= cutoff}
        for arc in f.arcs[s]:
            if arc.weight == 0 or lb[arc.next] == -math.inf:
                continue
            factor = arc.weight * math.exp(lb[arc.next] - lb[s])
            dest = pending[arc.next]
            if arc.label is None:
                for h, m in tokens.items():
                    dest[h] = dest.get(h, 0.0) + m * factor
            else:
                w = arc.label
                for h, m in tokens.items():
                    mass = m * factor
                    ctx = h + (w,)
                    _add_suffixes(table, ctx, mass)
                    nh = ctx[-keep:] if keep else ()
                    dest[nh] = dest.get(nh, 0.0) + mass
            if topo is None and arc.next not in queued:
                queued.add(arc.next)
                agenda.append(arc.next)
        fw = f.final_weight(s)
        if fw > 0 and boundaries:
            factor = fw * math.exp(-lb[s])
            for h, m in tokens.items():
                _add_suffixes(table, h + (EOS,), m * factor)

    if cutoff > 0:
        table = {g: c for g, c in table.items() if c >= cutoff}
    return ExpectedCounts(order, table)


def ngrams_of(words: Iterable[str], order: int, boundaries: bool = True) -> Iterable[NGram]:
    seq = tuple(words)
    if boundaries:
        seq = (BOS,) + seq + (EOS,)
    for i in range(len(seq)):
        for n in range(1, order + 1):
            if i + n > len(seq):
                break
            yield seq[i:i + n]


def brute_force_counts(
    f: WeightedFst,
    order: int,
    boundaries: bool = True,
    cap: int = DEFAULT_PATH_CAP,
) -> ExpectedCounts:
    """Enumerate every complete path and add its normalized weight per n-gram occurrence."""
    if order < 1:
        raise CountError("order must be >= 1")
    paths = list(enumerate_paths(f, cap))
    z = math.fsum(w for _, w in paths)
    if z <= 0:
        raise CountError("FST has no complete path with positive weight")
    table: dict[NGram, float] = {}
    for words, w in paths:
        p = w / z
        for g in ngrams_of(words, order, boundaries):
            table[g] = table.get(g, 0.0) + p
    return ExpectedCounts(order, table)


def counts_from_corpus(sentences: Iterable[Iterable[str]], order: int, boundaries: bool = True) -> dict[NGram, int]:
    table: dict[NGram, int] = {}
    for words in sentences:
        for g in ngrams_of(words, order, boundaries):
            table[g] = table.get(g, 0) + 1
    return table


@dataclass(frozen=True)
class ScaledCounts:
    counts: dict[NGram, int]
    scale: float


def scale_counts(c: ExpectedCounts | Mapping[NGram, float], target_mass: float = DEFAULT_TARGET_MASS) -> ScaledCounts:
    """Multiply by ``target_mass / unigram mass`` and round to integers, dropping zeros."""
    table = c.table if isinstance(c, ExpectedCounts) else c
    if not table:
        raise CountError("no counts to scale")
    if target_mass <= 0:
        raise CountError("target mass must be positive")
    mass = math.fsum(v for g, v in table.items() if len(g) == 1)
    if mass <= 0:
        raise CountError("unigram mass is zero")
    k = target_mass / mass
    scaled = {}
    for g, v in table.items():
        r = math.floor(v * k + 0.5)
        if r > 0:
            scaled[g] = r
    if not scaled:
        raise CountError("every count rounds to zero")
    return ScaledCounts(scaled, k)


def limit_new_vocabulary(
    counts: ExpectedCounts, known: Iterable[str], max_new: int = 10_000
) -> ExpectedCounts:
    """Keep the ``max_new`` most frequent words not in ``known``; drop n-grams using others."""
    known = set(known) | {BOS, EOS}
    new = [(c, g[0]) for g, c in counts.table.items() if len(g) == 1 and g[0] not in known]
    new.sort(key=lambda x: (-x[0], x[1]))
    allowed = known | {w for _, w in new[:max_new]}
    table = {g: c for g, c in counts.table.items() if all(w in allowed for w in g)}
    return ExpectedCounts(counts.order, table)


# ---------------------------------------------------------------------------
# counts file


def write_counts(table: Mapping[NGram, float], out: TextIO) -> None:
    for g in sorted(table):
        v = table[g]
        text = str(v) if isinstance(v, int) else repr(float(v))
        out.write(" ".join(g) + "\t" + text + "\n")


def read_counts(stream: TextIO) -> ExpectedCounts:
    table: dict[NGram, float] = {}
    for lineno, line in enumerate(stream, 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        try:
            words, value = line.rsplit("\t", 1)
            c = float(value)
        except ValueError:
            raise MalformedCounts(f"line {lineno}: malformed counts line {line!r}") from None
        g = tuple(words.split())
        if not g or c < 0:
            raise MalformedCounts(f"line {lineno}: malformed counts line {line!r}")
        table[g] = c
    if not table:
        raise MalformedCounts("empty counts file")
    return ExpectedCounts(max(len(g) for g in table), table)
