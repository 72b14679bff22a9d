"""N-best lists, word error counting, posteriors and expected WER."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .lm import LanguageModel, sentence_logprob

LN10 = math.log(10.0)


class AsrEvalError(Exception):
    pass


class EmptyReference(AsrEvalError):
    pass


@dataclass(frozen=True)
class Hypothesis:
    words: tuple[str, ...]
    acoustic_score: float
    lm_score: float | None = None


@dataclass(frozen=True)
class NBestList:
    utt_id: str
    reference: tuple[str, ...]
    hypotheses: tuple[Hypothesis, ...]

    def __post_init__(self) -> None:
        if not self.hypotheses:
            raise AsrEvalError(f"{self.utt_id}: n-best list is empty")
        if not all(math.isfinite(h.acoustic_score) for h in self.hypotheses):
            raise AsrEvalError(f"{self.utt_id}: non-finite acoustic score")


@dataclass(frozen=True)
class EditStats:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def error_rate(self) -> float:
        return self.errors / self.ref_len


@dataclass(frozen=True)
class Scales:
    lm_scale: float = 1.0
    acoustic_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.lm_scale <= 0 or self.acoustic_scale <= 0:
            raise AsrEvalError("scales must be positive")


def edit_distance(hyp: Sequence[str], ref: Sequence[str]) -> EditStats:
    """Word-level Levenshtein alignment; among minimal alignments prefer substitutions."""
    if not ref:
        raise EmptyReference("reference is empty")
    n, m = len(ref), len(hyp)
    # cost[i][j] = (errors, ins + del) so that ties favour substitutions
    cost = [[(0, 0)] * (m + 1) for _ in range(n + 1)]
    back = [[""] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = (i, i)
        back[i][0] = "D"
    for j in range(1, m + 1):
        cost[0][j] = (j, j)
        back[0][j] = "I"
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            e, g = cost[i - 1][j - 1]
            if ref[i - 1] == hyp[j - 1]:
                best, op = (e, g), "M"
            else:
                best, op = (e + 1, g), "S"
            e, g = cost[i - 1][j]
            if (e + 1, g + 1) < best:
                best, op = (e + 1, g + 1), "D"
            e, g = cost[i][j - 1]
            if (e + 1, g + 1) < best:
                best, op = (e + 1, g + 1), "I"
            cost[i][j] = best
            back[i][j] = op
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        op = back[i][j]
        if op in ("M", "S"):
            s += op == "S"
            i, j = i - 1, j - 1
        elif op == "D":
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditStats(s, ins, dels, n)


def _logsumexp(x: np.ndarray) -> float:
    mx = np.max(x)
    return float(mx + np.log(np.sum(np.exp(x - mx))))


def softmax(scores: Sequence[float]) -> np.ndarray:
    x = np.asarray(scores, dtype=float)
    return np.exp(x - _logsumexp(x))


def combined_scores(nb: NBestList, scorer: LanguageModel, scales: Scales = Scales()) -> np.ndarray:
    """acoustic_scale * acoustic + lm_scale * ln p_LM(words), per hypothesis."""
    out = []
    for h in nb.hypotheses:
        lm = sentence_logprob(scorer, h.words) * LN10
        out.append(scales.acoustic_scale * h.acoustic_score + scales.lm_scale * lm)
    return np.array(out)


def posterior(nb: NBestList, scorer: LanguageModel, scales: Scales = Scales()) -> np.ndarray:
    scores = combined_scores(nb, scorer, scales)
    if np.all(scores == -np.inf):
        raise AsrEvalError(f"{nb.utt_id}: every hypothesis has zero LM probability")
    return softmax(scores)


def expected_wer_loss(lists: Sequence[NBestList], scorer: LanguageModel, scales: Scales = Scales()) -> float:
    """Posterior-weighted errors summed over utterances, over total reference words."""
    if not lists:
        raise AsrEvalError("no n-best lists")
    num = 0.0
    den = 0
    for nb in lists:
        post = posterior(nb, scorer, scales)
        errs = np.array([edit_distance(h.words, nb.reference).errors for h in nb.hypotheses])
        num += float(post @ errs)
        den += len(nb.reference)
    return num / den


def one_best_wer(lists: Sequence[NBestList], scorer: LanguageModel, scales: Scales = Scales()) -> float:
    """Corpus WER of the top-scoring hypothesis per utterance (ties go to the earlier rank)."""
    if not lists:
        raise AsrEvalError("no n-best lists")
    errs = 0
    den = 0
    for nb in lists:
        best = int(np.argmax(combined_scores(nb, scorer, scales)))
        errs += edit_distance(nb.hypotheses[best].words, nb.reference).errors
        den += len(nb.reference)
    return errs / den


def oracle_wer(lists: Sequence[NBestList]) -> float:
    errs = sum(min(edit_distance(h.words, nb.reference).errors for h in nb.hypotheses) for nb in lists)
    return errs / sum(len(nb.reference) for nb in lists)


# ---------------------------------------------------------------------------
# files


def read_references(stream: TextIO | Iterable[str]) -> dict[str, tuple[str, ...]]:
    refs = {}
    for lineno, line in enumerate(stream, 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        utt, _, words = line.partition("\t")
        if not words.strip():
            raise AsrEvalError(f"line {lineno}: reference for {utt!r} is empty")
        refs[utt] = tuple(words.split())
    return refs


def read_nbest(stream: TextIO | Iterable[str], references: Mapping[str, Sequence[str]]) -> list[NBestList]:
    """Lines ``utt_id<TAB>rank<TAB>acoustic_score<TAB>words``; output keeps first-seen utterance order."""
    hyps: dict[str, list[tuple[int, Hypothesis]]] = {}
    for lineno, line in enumerate(stream, 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise AsrEvalError(f"line {lineno}: expected 4 tab-separated fields")
        try:
            rank, score = int(parts[1]), float(parts[2])
        except ValueError:
            raise AsrEvalError(f"line {lineno}: bad rank or score") from None
        hyps.setdefault(parts[0], []).append((rank, Hypothesis(tuple(parts[3].split()), score)))
    out = []
    for utt, items in hyps.items():
        if utt not in references:
            raise AsrEvalError(f"no reference for utterance {utt!r}")
        items.sort(key=lambda x: x[0])
        out.append(NBestList(utt, tuple(references[utt]), tuple(h for _, h in items)))
    return out


def write_nbest(lists: Iterable[NBestList], out: TextIO) -> None:
    for nb in lists:
        for rank, h in enumerate(nb.hypotheses, 1):
            out.write(f"{nb.utt_id}\t{rank}\t{h.acoustic_score!r}\t{' '.join(h.words)}\n")


def write_references(lists: Iterable[NBestList], out: TextIO) -> None:
    for nb in lists:
        out.write(f"{nb.utt_id}\t{' '.join(nb.reference)}\n")
