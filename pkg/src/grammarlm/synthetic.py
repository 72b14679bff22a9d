"""Synthetic grammars, FSTs and n-best lists used by tests and experiment scripts."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .asr_eval import Hypothesis, NBestList, edit_distance, write_nbest, write_references
from .counts import counts_from_corpus
from .grammar import Catalog, compile_grammar, expand_nonterminals, parse_grammar
from .lm import EvalCorpus, NGramModel, train_exact, train_katz, write_arpa
from .mixture import MixtureModel
from .optimizer import ConstraintSpec, ExpectedWerLoss, NegSquaredLoss, OptimizationProblem, PerplexityLoss
from .wfst import FstBuilder, WeightedFst, sample_paths, topological_order

SYLLABLES = [
    "ba", "ko", "mi", "ru", "te", "sa", "lo", "ni", "fe", "du", "pa", "zi",
    "go", "ve", "ha", "ju", "ke", "wo", "ri", "ta", "mu", "se", "do", "li",
]


def count_paths(f: WeightedFst) -> int:
    """Number of complete paths of an acyclic FST (positive-weight arcs only)."""
    order = topological_order(f)
    n = [0] * f.num_states
    for s in reversed(order):
        n[s] = (1 if f.final_weight(s) > 0 else 0) + sum(n[a.next] for a in f.arcs[s] if a.weight > 0)
    return n[f.start]


def random_acyclic_fst(
    rng: random.Random,
    num_states: int = 50,
    vocab: Sequence[str] = tuple("abcdefgh"),
    branch_prob: float = 0.25,
    epsilon_prob: float = 0.1,
    max_paths: int = 20_000,
) -> WeightedFst:
    """Random DAG acceptor; resampled until its path count is at most ``max_paths``."""
    while True:
        b = FstBuilder()
        for _ in range(num_states):
            b.add_state()
        last = num_states - 1
        for s in range(last):
            fanout = 1 + sum(rng.random() < branch_prob for _ in range(2))
            for _ in range(fanout):
                t = min(last, s + 1 + int(rng.expovariate(0.7)))
                label = None if rng.random() < epsilon_prob else rng.choice(vocab)
                b.add_arc(s, label, rng.uniform(0.05, 1.0), t)
            if rng.random() < 0.1:
                b.set_final(s, rng.uniform(0.1, 1.0))
        b.set_final(last, rng.uniform(0.5, 1.0))
        f = b.build()
        if count_paths(f) <= max_paths:
            return f


# ---------------------------------------------------------------------------
# random grammars


def _rand_words(rng: random.Random, vocab: Sequence[str], lo: int = 1, hi: int = 2) -> str:
    return " ".join(f'"{rng.choice(vocab)}"' for _ in range(rng.randint(lo, hi)))


def random_grammar(
    rng: random.Random,
    vocab: Sequence[str] = tuple("abcdefghij"),
    num_rules: int = 4,
    num_nonterminals: int = 2,
) -> tuple[str, list[Catalog]]:
    """Random acyclic grammar text (root rule ``r0``) plus catalogs for its non-terminals."""
    nts = [f"NT{i}" for i in range(num_nonterminals)]
    rules = []
    for i in reversed(range(num_rules)):
        later = [f"r{j}" for j in range(i + 1, num_rules)]
        branches = []
        for _ in range(rng.randint(1, 3)):
            parts = []
            for _ in range(rng.randint(1, 3)):
                roll = rng.random()
                if roll < 0.25 and later:
                    parts.append(rng.choice(later))
                elif roll < 0.4 and nts:
                    parts.append(rng.choice(nts))
                elif roll < 0.5:
                    parts.append(f"[{_rand_words(rng, vocab)}]")
                else:
                    parts.append(_rand_words(rng, vocab))
            branch = " ".join(parts)
            if rng.random() < 0.4:
                branch += f":{rng.randint(1, 5)}"
            branches.append(branch)
        rules.append(f"r{i} = ({' | '.join(branches)});")
    catalogs = []
    for nt in nts:
        entries = tuple(
            (tuple(rng.choice(vocab) for _ in range(rng.randint(1, 2))), float(rng.randint(1, 4)))
            for _ in range(rng.randint(1, 4))
        )
        catalogs.append(Catalog(nt, entries))
    return "\n".join(rules) + "\n", catalogs


def random_grammar_fst(rng: random.Random, max_paths: int = 10_000, **kwargs) -> WeightedFst:
    """Compile-and-replace a random grammar; resampled until it has at most ``max_paths`` paths."""
    while True:
        text, catalogs = random_grammar(rng, **kwargs)
        ast = parse_grammar(text)
        f = expand_nonterminals(compile_grammar(ast, "r0"), catalogs)
        if 0 < count_paths(f) <= max_paths:
            return f


# ---------------------------------------------------------------------------
# grammars with controlled non-terminal adjacency


def pseudo_words(rng: random.Random, n: int, taken: set[str] | None = None, syllables: int = 2) -> list[str]:
    taken = taken if taken is not None else set()
    out = []
    while len(out) < n:
        w = "".join(rng.choice(SYLLABLES) for _ in range(syllables + rng.randint(0, 1)))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass(frozen=True)
class GrammarFixture:
    name: str
    text: str
    root: str
    catalogs: tuple[Catalog, ...]
    nonterminal_pairs: int

    def fst(self) -> WeightedFst:
        return expand_nonterminals(compile_grammar(parse_grammar(self.text), self.root), self.catalogs)


def adjacency_fixture(
    name: str,
    num_nonterminals: int,
    num_pairs: int,
    seed: int,
    catalog_size: int = 8,
    num_templates: int | None = None,
) -> GrammarFixture:
    """Grammar whose templates contain ``num_pairs`` distinct adjacent non-terminal pairs.

    Templates are carrier phrases with non-terminal chains; each chain of
    length L contributes L-1 adjacent pairs.
    """
    rng = random.Random(seed)
    taken: set[str] = set()
    carrier = pseudo_words(rng, 12, taken)
    nts = [f"{name.upper()}_NT{i}" for i in range(num_nonterminals)]
    catalogs = tuple(
        Catalog(nt, tuple(((w,), float(rng.randint(1, 3))) for w in pseudo_words(rng, catalog_size, taken)))
        for nt in nts
    )
    all_pairs = [(a, b) for a in nts for b in nts if a != b]
    rng.shuffle(all_pairs)
    pairs = all_pairs[:num_pairs]
    templates = []
    # chain pairs greedily into runs of adjacent non-terminals
    remaining = list(pairs)
    while remaining:
        a, b = remaining.pop(0)
        chain = [a, b]
        extended = True
        while extended and len(chain) < 4:
            extended = False
            for i, (x, y) in enumerate(remaining):
                if x == chain[-1] and y not in chain:
                    chain.append(y)
                    remaining.pop(i)
                    extended = True
                    break
        templates.append(chain)
    # non-terminals that never got paired still appear once
    used = {nt for chain in templates for nt in chain}
    templates.extend([nt] for nt in nts if nt not in used)
    if num_templates is not None:
        templates = templates[:num_templates]
    branches = []
    for chain in templates:
        pre = " ".join(f'"{w}"' for w in rng.sample(carrier, rng.randint(1, 3)))
        post = " ".join(f'"{w}"' for w in rng.sample(carrier, rng.randint(0, 2)))
        body = " ".join(chain)
        branches.append(f"{pre} {body} {post}".strip() + f":{rng.randint(1, 4)}")
    text = f"{name} = ({' | '.join(branches)});\n"
    return GrammarFixture(name, text, name, catalogs, len(pairs))


def density_fixtures() -> list[GrammarFixture]:
    """Three grammars of increasing non-terminal-pair density (3, 23 and 203 pairs)."""
    return [
        adjacency_fixture("stocks", 3, 3, seed=11),
        adjacency_fixture("recipes", 12, 23, seed=12),
        adjacency_fixture("flights", 23, 203, seed=13),
    ]


# ---------------------------------------------------------------------------
# noisy channel


@dataclass(frozen=True)
class NoisyChannel:
    """Scripted recognizer: corrupts references with confusable words.

    Each word has a fixed set of acoustically confusable words. A hypothesis
    applies random substitutions (from the confusion set), deletions and
    insertions; its acoustic score is ``-gap * edits`` plus Gaussian noise,
    so acoustics alone often prefer a wrong hypothesis.
    """

    confusions: dict[str, tuple[str, ...]]
    gap: float = 1.0
    corrupt_gap: float = 1.0
    indel_gap: float = 1.0
    noise: float = 1.5
    edit_prob: float = 0.25
    nbest: int = 8

    @classmethod
    def build(cls, vocab: Sequence[str], seed: int, width: int = 3, **kwargs) -> "NoisyChannel":
        rng = random.Random(seed)
        vocab = sorted(set(vocab))
        conf = {}
        for w in vocab:
            others = [v for v in vocab if v != w]
            conf[w] = tuple(rng.sample(others, min(width, len(others))))
        return cls(conf, **kwargs)

    @classmethod
    def build_grouped(cls, groups: Sequence[Sequence[str]], seed: int, width: int = 3, **kwargs) -> "NoisyChannel":
        """Words are confusable only with words of their own group (e.g. one domain vocabulary)."""
        rng = random.Random(seed)
        conf: dict[str, tuple[str, ...]] = {}
        for g in groups:
            g = sorted(set(g))
            for w in g:
                others = [v for v in g if v != w]
                conf[w] = tuple(rng.sample(others, min(width, len(others))))
        return cls(conf, **kwargs)

    def corrupt(self, ref: Sequence[str], rng: random.Random) -> tuple[tuple[str, ...], int, int]:
        """Returns (words, substitutions, insertions + deletions)."""
        out: list[str] = []
        subs = indels = 0
        for w in ref:
            roll = rng.random()
            if roll < self.edit_prob * 0.7 and self.confusions.get(w):
                out.append(rng.choice(self.confusions[w]))
                subs += 1
            elif roll < self.edit_prob * 0.85:
                indels += 1
            elif roll < self.edit_prob:
                out.append(w)
                out.append(rng.choice(self.confusions.get(w) or (w,)))
                indels += 1
            else:
                out.append(w)
        return tuple(out), subs, indels

    def nbest_list(
        self,
        utt_id: str,
        ref: Sequence[str],
        rng: random.Random,
        neighbours: Sequence[Sequence[str]] = (),
    ) -> NBestList:
        """``neighbours`` are in-domain sentences close to ``ref``; each costs ``gap`` per word error."""
        ref = tuple(ref)
        hyps: dict[tuple[str, ...], float] = {ref: rng.gauss(0.0, self.noise)}
        for nb in neighbours:
            nb = tuple(nb)
            if nb not in hyps and len(hyps) < self.nbest:
                hyps[nb] = -self.gap * edit_distance(nb, ref).errors + rng.gauss(0.0, self.noise)
        tries = 0
        while len(hyps) < self.nbest and tries < 20 * self.nbest:
            tries += 1
            words, subs, indels = self.corrupt(ref, rng)
            if words in hyps or subs + indels == 0:
                continue
            hyps[words] = -self.corrupt_gap * subs - self.indel_gap * indels + rng.gauss(0.0, self.noise)
        ranked = sorted(hyps.items(), key=lambda kv: -kv[1])
        return NBestList(utt_id, ref, tuple(Hypothesis(w, s) for w, s in ranked))

    def nbest_lists(
        self,
        prefix: str,
        refs: Sequence[Sequence[str]],
        seed: int,
        pool: Sequence[Sequence[str]] = (),
        max_neighbours: int = 3,
        max_distance: int = 2,
    ) -> tuple[NBestList, ...]:
        """One list per non-empty reference; neighbours come from ``pool`` (distinct sentences)."""
        rng = random.Random(seed)
        pool = sorted({tuple(p) for p in pool if p})
        out = []
        for i, r in enumerate(refs):
            if not r:
                continue
            r = tuple(r)
            near = [p for p in pool if p != r and abs(len(p) - len(r)) <= max_distance
                    and edit_distance(p, r).errors <= max_distance]
            rng.shuffle(near)
            out.append(self.nbest_list(f"{prefix}{i:04d}", r, rng, near[:max_neighbours]))
        return tuple(out)


# ---------------------------------------------------------------------------
# adaptation scenario: baseline trained on past usage, new application grammars

COMMON_WORDS = (
    "i", "want", "to", "please", "the", "a", "me", "show", "what", "is",
    "for", "my", "can", "you", "how", "do", "now", "some",
)


def intent_grammar(
    name: str,
    rng: random.Random,
    taken: set[str],
    num_domain_words: int = 14,
    num_templates: int = 6,
    num_slots: int = 2,
    slot_size: int = 6,
) -> GrammarFixture:
    """Carrier phrases over shared function words and a private domain vocabulary."""
    domain = pseudo_words(rng, num_domain_words, taken)
    slots = [f"{name.upper()}_SLOT{i}" for i in range(num_slots)]
    catalogs = tuple(
        Catalog(s, tuple(((w,), float(rng.randint(1, 3))) for w in pseudo_words(rng, slot_size, taken)))
        for s in slots
    )
    branches = []
    for _ in range(num_templates):
        parts = [f'"{w}"' for w in rng.sample(COMMON_WORDS, rng.randint(1, 3))]
        parts += [f'"{w}"' for w in rng.sample(domain, rng.randint(1, 3))]
        if slots:
            parts.append(rng.choice(slots))
        if rng.random() < 0.5:
            parts.append(f'["{rng.choice(domain)}"]')
        branches.append(" ".join(parts) + f":{rng.randint(1, 4)}")
    text = f"{name} = ({' | '.join(branches)});\n"
    return GrammarFixture(name, text, name, catalogs, 0)


def union_fixture(name: str, parts: Sequence[GrammarFixture]) -> GrammarFixture:
    text = "".join(p.text for p in parts) + f"{name} = ({' | '.join(p.root for p in parts)});\n"
    catalogs = tuple(c for p in parts for c in p.catalogs)
    return GrammarFixture(name, text, name, catalogs, 0)


def chatter(rng: random.Random, n: int, pool: Sequence[str], exponent: float = 1.1) -> list[list[str]]:
    """Zipf-distributed filler sentences: the long tail a real baseline corpus has."""
    weights = [1.0 / (r + 1) ** exponent for r in range(len(pool))]
    return [rng.choices(pool, weights, k=rng.randint(2, 8)) for _ in range(n)]


@dataclass(frozen=True)
class AppData:
    name: str
    fixture: GrammarFixture
    model: NGramModel
    dev: EvalCorpus
    test: EvalCorpus
    dev_nbest: tuple[NBestList, ...]
    test_nbest: tuple[NBestList, ...]


@dataclass(frozen=True)
class Scenario:
    """A baseline trained on past usage plus new application grammars with held-out data."""

    baseline: NGramModel
    past: GrammarFixture
    past_corpus: EvalCorpus
    past_nbest: tuple[NBestList, ...]
    apps: tuple[AppData, ...]

    @property
    def components(self) -> tuple[NGramModel, ...]:
        return (self.baseline,) + tuple(a.model for a in self.apps)


def _corpus(sents: Sequence[Sequence[str]]) -> EvalCorpus:
    return EvalCorpus(tuple(tuple(s) for s in sents))


def build_scenario(
    num_apps: int = 1,
    seed: int = 5,
    past_intents: int = 6,
    general_words: int = 2000,
    baseline_samples: int = 20_000,
    baseline_chatter: int = 60_000,
    order: int = 3,
    dev_size: int = 200,
    test_size: int = 300,
    nbest_dev: int = 150,
    nbest_test: int = 100,
    nbest_past: int = 150,
    pool_size: int = 1000,
    corrupt_gap: float = 5.0,
    indel_gap: float = 6.0,
) -> Scenario:
    """Mismatched baseline (past intents plus Zipfian chatter, open vocabulary) and exact-count app models."""
    rng = random.Random(seed)
    taken = set(COMMON_WORDS)
    past = union_fixture("past", [intent_grammar(f"past{i}", rng, taken) for i in range(past_intents)])
    apps = [intent_grammar(f"app{i}", rng, taken, num_templates=8) for i in range(num_apps)]
    general = list(COMMON_WORDS) + pseudo_words(rng, general_words, taken)
    past_fst = past.fst()
    app_fsts = [a.fst() for a in apps]

    train = sample_paths(past_fst, baseline_samples, seed + 1) + chatter(rng, baseline_chatter, general)
    baseline = train_katz(counts_from_corpus(train, order), order, unk=True)

    common = set(COMMON_WORDS)
    groups = [common, (past_fst.vocabulary() | set(general)) - common]
    groups += [f.vocabulary() - common for f in app_fsts]
    channel = NoisyChannel.build_grouped(groups, seed=seed + 2, corrupt_gap=corrupt_gap, indel_gap=indel_gap)

    prng = random.Random(seed + 3)
    past_sents = sample_paths(past_fst, 150, seed + 4) + chatter(prng, 150, general)
    prng.shuffle(past_sents)
    past_pool = sample_paths(past_fst, pool_size, seed + 6)
    past_nbest = channel.nbest_lists("past", past_sents[:nbest_past], seed + 5, past_pool)

    out = []
    for i, (fix, f) in enumerate(zip(apps, app_fsts)):
        s = seed + 100 * (i + 1)
        model = train_exact(f, order)
        dev = _corpus(sample_paths(f, dev_size, s))
        test = _corpus(sample_paths(f, test_size, s + 1))
        pool = sample_paths(f, pool_size, s + 6)
        dnb = channel.nbest_lists(f"{fix.name}_dev", sample_paths(f, nbest_dev, s + 2), s + 3, pool)
        tnb = channel.nbest_lists(f"{fix.name}_test", sample_paths(f, nbest_test, s + 4), s + 5, pool)
        out.append(AppData(fix.name, fix, model, dev, test, dnb, tnb))
    return Scenario(baseline, past, _corpus(past_sents), past_nbest, tuple(out))


def write_scenario(
    sc: Scenario,
    directory: str | Path,
    loss: str = "expected_wer",
    constraint: str = "perplexity",
) -> Path:
    """Dump models, corpora, n-best lists and a run spec; returns the run spec path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)

    def text(name: str, writer) -> str:
        with open(d / name, "w", encoding="utf-8") as fh:
            writer(fh)
        return name

    def corpus(name: str, c: EvalCorpus) -> str:
        return text(name, lambda fh: fh.writelines(" ".join(s) + "\n" for s in c.sentences))

    def nbest(stem: str, lists: Sequence[NBestList]) -> dict[str, str]:
        return {
            "nbest": text(f"{stem}.nbest", lambda fh: write_nbest(lists, fh)),
            "references": text(f"{stem}.ref", lambda fh: write_references(lists, fh)),
        }

    spec: dict = {"baseline": text("baseline.arpa", lambda fh: write_arpa(sc.baseline, fh)), "apps": []}
    for a in sc.apps:
        dev = {"corpus": corpus(f"{a.name}.dev.txt", a.dev), **nbest(f"{a.name}.dev", a.dev_nbest)}
        test = {"corpus": corpus(f"{a.name}.test.txt", a.test), **nbest(f"{a.name}.test", a.test_nbest)}
        loss_ref = {"kind": loss}
        if loss == "perplexity":
            loss_ref["corpus"] = dev["corpus"]
        elif loss == "expected_wer":
            loss_ref.update(nbest=dev["nbest"], references=dev["references"])
        spec["apps"].append({
            "name": a.name,
            "model": text(f"{a.name}.arpa", lambda fh, m=a.model: write_arpa(m, fh)),
            "loss": loss_ref,
            "test": test,
        })
    past = {"corpus": corpus("past.txt", sc.past_corpus), **nbest("past", sc.past_nbest)}
    cons = {"kind": constraint}
    if constraint == "perplexity":
        cons["corpus"] = past["corpus"]
    elif constraint == "expected_wer":
        cons.update(nbest=past["nbest"], references=past["references"])
    spec["constraint"] = cons
    spec["past_test"] = past
    spec["output"] = {"solution": "solution.json", "report": "report.txt"}
    path = d / "run.json"
    path.write_text(json.dumps(spec, indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# small random interpolation problems


def random_problem(
    rng: random.Random,
    loss: str,
    constraint: str | None = None,
    order: int = 2,
    sigma: float = 1000.0,
) -> OptimizationProblem:
    """Two-component problem: a baseline and an app model over overlapping vocabularies.

    ``loss`` is ``perplexity``, ``expected_wer`` or ``neg_squared``; the
    past-data constraint kind is drawn at random unless given.
    """
    pool = pseudo_words(rng, 40)
    base_pool, app_pool = pool[:30], pool[15:]
    rng.shuffle(app_pool)
    base = train_katz(counts_from_corpus(chatter(rng, rng.randint(100, 400), base_pool), order), order, vocab=pool, unk=True)
    app = train_katz(counts_from_corpus(chatter(rng, rng.randint(50, 200), app_pool), order), order, vocab=pool, unk=True)
    channel = NoisyChannel.build(pool, seed=rng.randrange(10**6), noise=1.0)

    def data(kind: str, words: Sequence[str], n: int):
        sents = chatter(rng, n, words)
        if kind == "perplexity":
            return PerplexityLoss(_corpus(sents))
        return ExpectedWerLoss(channel.nbest_lists("u", sents, rng.randrange(10**6)))

    if loss == "neg_squared":
        app_loss = NegSquaredLoss(target=1)
    elif loss in ("perplexity", "expected_wer"):
        app_loss = data(loss, app_pool, rng.randint(15, 40))
    else:
        raise ValueError(f"unknown loss {loss!r}")
    kind = constraint or rng.choice(["perplexity", "expected_wer"])
    past = ConstraintSpec(data(kind, base_pool, rng.randint(15, 40)), sigma)
    return OptimizationProblem(MixtureModel((base, app), (1.0, 0.0)), (app_loss,), past)
