"""Linear interpolation of n-gram models."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .lm import EvalCorpus, NGramModel, read_arpa

SIMPLEX_TOL = 1e-9


class MixtureError(Exception):
    pass


class NotSimplex(MixtureError):
    pass


class NegativeWeight(MixtureError):
    pass


def check_simplex(weights: Sequence[float], n: int | None = None) -> tuple[float, ...]:
    lam = tuple(float(x) for x in weights)
    if n is not None and len(lam) != n:
        raise MixtureError(f"expected {n} weights, got {len(lam)}")
    if not lam:
        raise MixtureError("mixture needs at least one component")
    if any(x < 0 or math.isnan(x) for x in lam):
        raise NegativeWeight(f"negative interpolation weight in {lam}")
    if abs(math.fsum(lam) - 1.0) > SIMPLEX_TOL:
        raise NotSimplex(f"weights sum to {math.fsum(lam)}, not 1")
    return lam


@dataclass(frozen=True)
class MixtureModel:
    """``p(w|h) = sum_k weights[k] * p_k(w|h)``; component 0 is the baseline by convention."""

    components: tuple[NGramModel, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "weights", check_simplex(self.weights, len(self.components)))

    @classmethod
    def two_component(cls, baseline: NGramModel, app: NGramModel, lambda_app: float) -> "MixtureModel":
        return cls((baseline, app), (1.0 - lambda_app, lambda_app))

    @classmethod
    def baseline_only(cls, components: Sequence[NGramModel]) -> "MixtureModel":
        return cls(tuple(components), (1.0,) + (0.0,) * (len(components) - 1))

    def prob(self, word: str, history: Sequence[str]) -> float:
        return math.fsum(
            lam * m.prob(word, history) for lam, m in zip(self.weights, self.components) if lam > 0
        )

    @property
    def vocab(self) -> set[str]:
        out: set[str] = set()
        for m in self.components:
            out |= m.vocab
        return out


def mix_prob(m: MixtureModel, word: str, history: Sequence[str]) -> float:
    return m.prob(word, history)


def set_weights(m: MixtureModel, weights: Sequence[float]) -> MixtureModel:
    return MixtureModel(m.components, tuple(weights))


def component_probs(components: Sequence[NGramModel], corpus: EvalCorpus) -> np.ndarray:
    """(scored words x components) matrix of conditional probabilities."""
    rows = [[m.prob(w, h) for m in components] for w, h in corpus.tokens()]
    return np.array(rows, dtype=float).reshape(len(rows), len(components))


# ---------------------------------------------------------------------------
# mixture spec file: one ``model_path<TAB>weight`` per line


def read_mixture_spec(stream: TextIO | Iterable[str], base: Path | None = None) -> list[tuple[Path, float]]:
    out = []
    for lineno, line in enumerate(stream, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.rsplit(None, 1)
        if len(parts) != 2:
            raise MixtureError(f"line {lineno}: expected 'path<TAB>weight'")
        path = Path(parts[0].strip())
        if base is not None and not path.is_absolute():
            path = base / path
        try:
            out.append((path, float(parts[1])))
        except ValueError:
            raise MixtureError(f"line {lineno}: bad weight {parts[1]!r}") from None
    if not out:
        raise MixtureError("mixture spec lists no models")
    return out


def load_mixture(stream: TextIO | Iterable[str], base: Path | None = None) -> MixtureModel:
    spec = read_mixture_spec(stream, base)
    models = []
    for path, _ in spec:
        with open(path, encoding="utf-8") as fh:
            models.append(read_arpa(fh))
    return MixtureModel(tuple(models), tuple(w for _, w in spec))
