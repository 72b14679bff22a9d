"""Katz back-off n-gram models: training, scoring, ARPA I/O."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence, TextIO

from .counts import (
    BOS,
    DEFAULT_TARGET_MASS,
    EOS,
    NGram,
    PruneConfig,
    counts_from_corpus,
    expected_counts,
    scale_counts,
)
from .wfst import WeightedFst, sample_paths

log = logging.getLogger(__name__)

UNK = "<unk>"
KATZ_K = 5
FALLBACK_DISCOUNT = 0.5
LOG_ZERO = -99.0
PRECISION = 6
_STEP = 10.0 ** -PRECISION


class LmError(Exception):
    pass


class EmptyModel(LmError):
    pass


class MalformedArpa(LmError):
    pass


class InfinitePerplexity(LmError):
    pass


@dataclass(frozen=True)
class Entry:
    logprob: float
    backoff: float | None = None


@dataclass
class NGramModel:
    order: int
    tables: list[dict[NGram, Entry]] = field(default_factory=list)

    @property
    def vocab(self) -> set[str]:
        return {g[0] for g in self.tables[0]} if self.tables else set()

    def predictable_vocab(self) -> list[str]:
        return sorted(w for w in self.vocab if w != BOS)

    @property
    def has_unk(self) -> bool:
        return bool(self.tables) and (UNK,) in self.tables[0]

    def num_entries(self) -> int:
        return sum(len(t) for t in self.tables)

    def map_word(self, word: str) -> str:
        if (word,) in self.tables[0] or not self.has_unk:
            return word
        return UNK

    def logprob(self, word: str, history: Sequence[str]) -> float:
        """log10 p(word | history) resolved through back-off; -inf for OOV without <unk>."""
        word = self.map_word(word)
        ctx = tuple(self.map_word(w) for w in history[max(0, len(history) - (self.order - 1)):]) if self.order > 1 else ()
        acc = 0.0
        while True:
            g = ctx + (word,)
            e = self.tables[len(g) - 1].get(g)
            if e is not None:
                return acc + e.logprob
            if not ctx:
                return -math.inf
            h = self.tables[len(ctx) - 1].get(ctx)
            if h is not None and h.backoff is not None:
                acc += h.backoff
            ctx = ctx[1:]

    def prob(self, word: str, history: Sequence[str]) -> float:
        lp = self.logprob(word, history)
        return 0.0 if lp == -math.inf else 10.0 ** lp

    def histories(self) -> list[NGram]:
        """The empty history plus every entry carrying a back-off weight."""
        out: list[NGram] = [()]
        for t in self.tables[:-1]:
            out.extend(g for g, e in t.items() if e.backoff is not None)
        return out


class LanguageModel(Protocol):
    def prob(self, word: str, history: Sequence[str]) -> float: ...


# ---------------------------------------------------------------------------
# training


def good_turing_discounts(count_of_counts: Mapping[int, int], k: int = KATZ_K) -> dict[int, float] | None:
    """Katz discount ratios d_r for 1 <= r <= k, or None when the statistics are unusable."""
    n = count_of_counts
    if not any(n.get(r, 0) for r in range(1, k + 1)):
        return {}  # nothing rare enough to discount
    n1 = n.get(1, 0)
    if n1 == 0:
        return None
    common = (k + 1) * n.get(k + 1, 0) / n1
    if common >= 1:
        return None
    out = {}
    for r in range(1, k + 1):
        nr, nr1 = n.get(r, 0), n.get(r + 1, 0)
        if nr == 0:
            continue  # no n-gram has this count; ratio never used
        if nr1 == 0:
            return None
        d = ((r + 1) * nr1 / (r * nr) - common) / (1 - common)
        if not 0 < d <= 1:
            return None
        out[r] = d
    return out


def _discount_fn(table: Mapping[NGram, int], order: int, k: int):
    coc: dict[int, int] = {}
    for g, c in table.items():
        if g == (BOS,):
            continue
        if c <= k + 1:
            coc[c] = coc.get(c, 0) + 1
    ratios = good_turing_discounts(coc, k)
    if ratios is None:
        log.warning(
            "order %d: count-of-counts unusable for Good-Turing, using absolute discount %.1f",
            order, FALLBACK_DISCOUNT,
        )

        def discount(c: int) -> float:
            return (c - FALLBACK_DISCOUNT) / c if c <= k else 1.0
    else:
        def discount(c: int) -> float:
            return ratios.get(c, 1.0) if c <= k else 1.0
    return discount


def _r6(x: float) -> float:
    return round(x, PRECISION)


def _log10(p: float) -> float:
    return math.log10(p) if p > 0 else LOG_ZERO


def _balance(logps: list[float], fixed_mass: float = 0.0, free_bow: tuple[float, float] | None = None):
    """Round log10 values to the printed grid and nudge them by single steps so
    that ``sum(10**q) + fixed_mass (+ 10**bow * lower)`` stays as close to 1 as
    the grid allows."""
    qs = [_r6(q) for q in logps]
    items = list(range(len(qs)))
    bow = None
    lower = 0.0
    if free_bow is not None:
        bow_exact, lower = free_bow
        bow = _r6(bow_exact)

    if bow is not None and lower > 0:
        # fit the weight to the rounded explicit mass: near p=1 the grid is too coarse to absorb the error
        rest = 1.0 - fixed_mass - math.fsum(10.0 ** q for q in qs)
        if rest > 0:
            bow = max(_r6(math.log10(rest / lower)), LOG_ZERO)

    def total():
        s = math.fsum(10.0 ** q for q in qs) + fixed_mass
        if bow is not None:
            s += 10.0 ** bow * lower
        return s

    resid = 1.0 - total()
    # largest contributions move the sum in the biggest steps
    order = sorted(items, key=lambda i: -qs[i])
    for _ in range(3):
        changed = False
        if bow is not None and lower > 0:
            best = resid
            pick = bow
            for step in (-_STEP, _STEP):
                cand = _r6(bow + step)
                r = resid - (10.0 ** cand - 10.0 ** bow) * lower
                if abs(r) < abs(best):
                    best, pick = r, cand
            if pick != bow:
                resid, bow, changed = best, pick, True
        for i in order:
            if qs[i] <= LOG_ZERO:
                continue
            best = resid
            pick = qs[i]
            for step in (-_STEP, _STEP):
                cand = _r6(qs[i] + step)
                if abs(cand - logps[i]) > 1.5 * _STEP:
                    continue
                r = resid - (10.0 ** cand - 10.0 ** qs[i])
                if abs(r) < abs(best):
                    best, pick = r, cand
            if pick != qs[i]:
                resid, qs[i], changed = best, pick, True
            if abs(resid) < 1e-9:
                break
        if not changed or abs(resid) < 1e-9:
            break
    return qs, bow


def train_katz(
    counts: Mapping[NGram, int],
    order: int,
    cutoffs: Mapping[int, int] | None = None,
    vocab: Iterable[str] = (),
    unk: bool = False,
    k: int = KATZ_K,
) -> NGramModel:
    """Katz back-off model from integer counts (boundary symbols included).

    ``vocab`` adds words that may be predicted although unseen; they, and
    ``<unk>`` when ``unk`` is set, share the unigram mass freed by discounting.
    ``cutoffs`` maps order -> minimum count for an explicit entry (order >= 2).
    """
    if order < 1:
        raise LmError("order must be >= 1")
    if not counts:
        raise EmptyModel("no counts to train on")
    cutoffs = dict(cutoffs or {})
    by_order: list[dict[NGram, int]] = [dict() for _ in range(order)]
    for g, c in counts.items():
        if 1 <= len(g) <= order and c > 0:
            by_order[len(g) - 1][g] = int(c)
    uni = by_order[0]
    if not any(g != (BOS,) for g in uni):
        raise EmptyModel("no unigram counts")

    model = NGramModel(order, [dict() for _ in range(order)])

    # unigrams
    disc = _discount_fn(uni, 1, k)
    words = sorted({g[0] for g in uni} | set(vocab) | ({UNK} if unk else set()))
    pred = [w for w in words if w != BOS]
    total = sum(c for g, c in uni.items() if g != (BOS,))
    probs = {w: disc(uni[(w,)]) * uni[(w,)] / total for w in pred if (w,) in uni}
    unseen = [w for w in pred if (w,) not in uni]
    left = 1.0 - math.fsum(probs.values())
    if unseen and left <= 1e-12:
        # nothing was discounted, yet unseen words need mass
        probs = {w: (uni[(w,)] - FALLBACK_DISCOUNT) / total for w in probs}
        left = 1.0 - math.fsum(probs.values())
    if unseen:
        for w in unseen:
            probs[w] = left / len(unseen)
    else:
        s = math.fsum(probs.values())
        probs = {w: p / s for w, p in probs.items()}
    qs, _ = _balance([_log10(probs[w]) for w in pred])
    for w, q in zip(pred, qs):
        model.tables[0][(w,)] = Entry(q)
    if BOS in words:
        model.tables[0][(BOS,)] = Entry(LOG_ZERO)

    # higher orders
    pred_vocab = [g[0] for g in model.tables[0] if g != (BOS,)]
    conts: dict[NGram, list[str]] = {}
    totals: dict[NGram, float] = {(): math.fsum(10.0 ** e.logprob for g, e in model.tables[0].items() if g != (BOS,))}

    def total_mass(h: NGram) -> float:
        # sum_w p(w|h) of the rounded model, from explicit entries and the back-off share
        if h not in totals:
            e = model.tables[len(h) - 1].get(h)
            if e is None or e.backoff is None or h not in conts:
                totals[h] = total_mass(h[1:])
            else:
                ws = conts[h]
                explicit = math.fsum(10.0 ** model.tables[len(h)][h + (w,)].logprob for w in ws)
                lower = total_mass(h[1:]) - math.fsum(model.prob(w, h[1:]) for w in ws)
                totals[h] = explicit + 10.0 ** e.backoff * lower
        return totals[h]
    for n in range(2, order + 1):
        table = by_order[n - 1]
        disc = _discount_fn(table, n, k)
        lower_table = model.tables[n - 2]
        groups: dict[NGram, list[tuple[str, int]]] = {}
        for g, c in table.items():
            groups.setdefault(g[:-1], []).append((g[-1], c))
        cut = cutoffs.get(n, 1)
        for h in sorted(groups):
            if h not in lower_table:
                continue
            items = sorted(groups[h])
            ch = sum(c for _, c in items)
            kept = [(w, c) for w, c in items if c >= cut and (w,) in model.tables[0] and w != BOS]
            if not kept:
                continue
            ps = [disc(c) * c / ch for _, c in kept]
            num = 1.0 - math.fsum(ps)
            seen = {w for w, _ in kept}
            if len(pred_vocab) - len(seen) <= len(seen):
                # sum the unseen side directly so rounding cannot fake leftover mass
                den = math.fsum(model.prob(w, h[1:]) for w in pred_vocab if w not in seen)
            else:
                den = total_mass(h[1:]) - math.fsum(model.prob(w, h[1:]) for w in seen)
            if num <= 1e-12 < den:
                # no continuation is rare enough to discount: reserve back-off mass anyway
                ps = [(c - FALLBACK_DISCOUNT) / ch for _, c in kept]
                num = 1.0 - math.fsum(ps)
            if den <= 1e-12:
                # every word already explicit: absorb the leftover
                s = math.fsum(ps)
                ps = [p / s for p in ps]
                qs, bow = _balance([_log10(p) for p in ps])
                bow = 0.0
            elif num <= 1e-12:
                qs, _ = _balance([_log10(p) for p in ps])
                bow = LOG_ZERO
            else:
                qs, bow = _balance([_log10(p) for p in ps], free_bow=(math.log10(num / den), den))
            for (w, _), q in zip(kept, qs):
                model.tables[n - 1][h + (w,)] = Entry(q)
            prev = lower_table[h]
            lower_table[h] = Entry(prev.logprob, bow)
            conts[h] = [w for w, _ in kept]
    # trailing orders can end up empty (e.g. every history cut off)
    while len(model.tables) > 1 and not model.tables[-1]:
        model.tables.pop()
    model.order = len(model.tables)
    return model


# ---------------------------------------------------------------------------
# scoring


def sentence_logprob(m: NGramModel | LanguageModel, sentence: Sequence[str], boundaries: bool = True) -> float:
    """log10 probability: every word plus the end symbol; the start symbol is context only."""
    total = 0.0
    hist: list[str] = [BOS] if boundaries else []
    targets = list(sentence) + ([EOS] if boundaries else [])
    for w in targets:
        p = m.prob(w, hist)
        if p <= 0:
            return -math.inf
        total += math.log10(p)
        hist.append(w)
    return total


@dataclass(frozen=True)
class EvalCorpus:
    sentences: tuple[tuple[str, ...], ...]
    boundaries: bool = True

    @property
    def m(self) -> int:
        return sum(len(s) + (1 if self.boundaries else 0) for s in self.sentences)

    def tokens(self) -> Iterable[tuple[str, tuple[str, ...]]]:
        """(word, full history) for every scored position."""
        for s in self.sentences:
            hist: tuple[str, ...] = (BOS,) if self.boundaries else ()
            for w in s + ((EOS,) if self.boundaries else ()):
                yield w, hist
                hist = hist + (w,)


def read_corpus(stream: TextIO | Iterable[str], boundaries: bool = True) -> EvalCorpus:
    sents = tuple(tuple(line.split()) for line in stream if line.strip())
    return EvalCorpus(sents, boundaries)


def perplexity(m: NGramModel | LanguageModel, c: EvalCorpus) -> float:
    if c.m <= 0:
        raise LmError("corpus has no scored words")
    total = 0.0
    for w, h in c.tokens():
        p = m.prob(w, h)
        if p <= 0:
            raise InfinitePerplexity(f"zero probability for {w!r} after {' '.join(h[-3:])!r}")
        total += math.log(p)
    return math.exp(-total / c.m)


def normalization_error(m: NGramModel, exhaustive: bool = False) -> float:
    """Largest |sum_w p(w|h) - 1| over the empty history and every back-off history.

    By default each sum is assembled from the explicit entries of ``h`` plus the
    back-off share of the shorter history's sum, which costs one pass over the
    entries. ``exhaustive`` scores every vocabulary word under every history.
    """
    vocab = m.predictable_vocab()
    if exhaustive:
        return max(abs(math.fsum(m.prob(w, h) for w in vocab) - 1.0) for h in m.histories())

    explicit: dict[NGram, list[str]] = {}
    for t in m.tables[1:]:
        for g in t:
            if g[-1] != BOS:
                explicit.setdefault(g[:-1], []).append(g[-1])
    sums: dict[NGram, float] = {(): math.fsum(m.prob(w, ()) for w in vocab)}

    def total(h: NGram) -> float:
        if h not in sums:
            lower = total(h[1:])
            e = m.tables[len(h) - 1].get(h) if len(h) < m.order else None
            bow = 10.0 ** e.backoff if e is not None and e.backoff is not None else 1.0
            conts = explicit.get(h, [])
            own = math.fsum(m.prob(w, h) for w in conts)
            sums[h] = own + bow * (lower - math.fsum(m.prob(w, h[1:]) for w in conts))
        return sums[h]

    return max(abs(total(h) - 1.0) for h in m.histories())


# ---------------------------------------------------------------------------
# ARPA


def _fmt(x: float) -> str:
    return f"{x:.{PRECISION}f}"


def write_arpa(m: NGramModel, out: TextIO) -> None:
    if not m.tables or not m.tables[0]:
        raise EmptyModel("model has no entries")
    out.write("\n\\data\\\n")
    for n, t in enumerate(m.tables, 1):
        out.write(f"ngram {n}={len(t)}\n")
    for n, t in enumerate(m.tables, 1):
        out.write(f"\n\\{n}-grams:\n")
        for g in sorted(t):
            e = t[g]
            line = _fmt(e.logprob) + "\t" + " ".join(g)
            if e.backoff is not None:
                line += "\t" + _fmt(e.backoff)
            out.write(line + "\n")
    out.write("\n\\end\\\n")


def read_arpa(stream: TextIO | Iterable[str]) -> NGramModel:
    lines = [ln.strip() for ln in stream]
    it = iter(enumerate(lines, 1))
    declared: dict[int, int] = {}
    for lineno, ln in it:
        if ln == "\\data\\":
            break
        if ln:
            raise MalformedArpa(f"line {lineno}: expected \\data\\, found {ln!r}")
    else:
        raise MalformedArpa("missing \\data\\ header")
    section = None
    tables: dict[int, dict[NGram, Entry]] = {}
    ended = False
    for lineno, ln in it:
        if not ln:
            continue
        if ln.startswith("ngram ") and section is None:
            try:
                n, c = ln[6:].split("=")
                declared[int(n)] = int(c)
            except ValueError:
                raise MalformedArpa(f"line {lineno}: bad count line {ln!r}") from None
            continue
        if ln == "\\end\\":
            ended = True
            break
        if ln.startswith("\\") and ln.endswith("-grams:"):
            try:
                section = int(ln[1:-7])
            except ValueError:
                raise MalformedArpa(f"line {lineno}: bad section header {ln!r}") from None
            if section not in declared:
                raise MalformedArpa(f"line {lineno}: section {section} not declared")
            tables[section] = {}
            continue
        if section is None:
            raise MalformedArpa(f"line {lineno}: unexpected {ln!r}")
        parts = ln.split()
        try:
            lp = float(parts[0])
            words = tuple(parts[1:1 + section])
            if len(words) != section:
                raise ValueError
            rest = parts[1 + section:]
            if len(rest) > 1:
                raise ValueError
            bo = float(rest[0]) if rest else None
        except (ValueError, IndexError):
            raise MalformedArpa(f"line {lineno}: bad {section}-gram line {ln!r}") from None
        tables[section][words] = Entry(lp, bo)
    if not ended:
        raise MalformedArpa("missing \\end\\")
    if not declared or sum(declared.values()) == 0:
        raise EmptyModel("ARPA file declares no n-grams")
    order = max(declared)
    for n in range(1, order + 1):
        got = len(tables.get(n, {}))
        if got != declared.get(n, -1):
            raise MalformedArpa(f"{n}-gram count mismatch: declared {declared.get(n)}, found {got}")
    return NGramModel(order, [tables[n] for n in range(1, order + 1)])


# ---------------------------------------------------------------------------
# grammar-derived models


def train_from_counts(
    counts: Mapping[NGram, float],
    order: int,
    target_mass: float = DEFAULT_TARGET_MASS,
    vocab: Iterable[str] = (),
    **katz,
) -> NGramModel:
    scaled = scale_counts(counts, target_mass)
    return train_katz(scaled.counts, order, vocab=vocab, **katz)


def train_exact(
    f: WeightedFst,
    order: int,
    prune: PruneConfig = PruneConfig(),
    target_mass: float = DEFAULT_TARGET_MASS,
    **katz,
) -> NGramModel:
    counts = expected_counts(f, order, boundaries=True, prune=prune)
    return train_from_counts(counts.table, order, target_mass, vocab=f.vocabulary(), **katz)


def train_from_samples(
    f: WeightedFst,
    n_samples: int,
    seed: int | random.Random,
    order: int,
    **katz,
) -> NGramModel:
    """Sampling baseline: draw sentences from the FST and train on their integer counts."""
    sentences = sample_paths(f, n_samples, seed)
    counts = counts_from_corpus(sentences, order)
    return train_katz(counts, order, vocab=f.vocabulary(), **katz)
