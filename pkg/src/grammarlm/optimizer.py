"""Constrained interpolation-weight estimation with a quadratic penalty.

Minimizes ``sum_i loss_i(lambda) + sigma * max(0, past_loss(lambda) - C)**2``
over the probability simplex, where ``C`` is the past-data loss of the
baseline (component 0) alone.

Losses are bound once to the component models, which precomputes every
conditional probability they need; afterwards a batch of weight vectors is
scored with a single matrix product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence, Union

import numpy as np

from .asr_eval import NBestList, Scales, edit_distance
from .lm import BOS, EOS, EvalCorpus, NGramModel
from .mixture import MixtureModel, check_simplex, component_probs

DEFAULT_SIGMA = 1000.0
FEASIBILITY_SLACK = 1e-3
_CHUNK = 256


class OptimizationError(Exception):
    pass


class NonFiniteLoss(OptimizationError):
    def __init__(self, message: str, weights: Sequence[float]):
        super().__init__(f"{message} at lambda={tuple(float(x) for x in weights)}")
        self.weights = tuple(weights)


def _as_batch(lam) -> tuple[np.ndarray, bool]:
    arr = np.asarray(lam, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


class BoundLoss:
    """Loss evaluable at one weight vector (K,) or a batch (G, K)."""

    def batch(self, lam: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, lam):
        arr, single = _as_batch(lam)
        out = np.concatenate([self.batch(arr[i:i + _CHUNK]) for i in range(0, len(arr), _CHUNK)])
        return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# loss specifications


@dataclass(frozen=True)
class NegSquaredLoss:
    """``-lambda_target**2``: pushes weight onto one component when no app data exists."""

    target: int | None = None
    name: str = "neg_squared"

    def bind(self, components: Sequence[NGramModel]) -> BoundLoss:
        if self.target is None or not 0 < self.target < len(components):
            raise OptimizationError(f"neg-squared loss needs a target component, got {self.target}")
        return _NegSquared(self.target)


@dataclass(frozen=True)
class PerplexityLoss:
    corpus: EvalCorpus
    name: str = "perplexity"

    def bind(self, components: Sequence[NGramModel]) -> BoundLoss:
        return _Perplexity(component_probs(components, self.corpus))


@dataclass(frozen=True)
class ExpectedWerLoss:
    lists: tuple[NBestList, ...]
    scales: Scales = Scales()
    name: str = "expected_wer"

    def bind(self, components: Sequence[NGramModel]) -> BoundLoss:
        return _ExpectedWer(self.lists, components, self.scales)


LossSpec = Union[NegSquaredLoss, PerplexityLoss, ExpectedWerLoss]


class _NegSquared(BoundLoss):
    def __init__(self, target: int):
        self.target = target

    def batch(self, lam):
        return -lam[:, self.target] ** 2


class _Perplexity(BoundLoss):
    def __init__(self, probs: np.ndarray):
        if probs.shape[0] == 0:
            raise OptimizationError("perplexity loss on an empty corpus")
        self.probs = probs

    def batch(self, lam):
        mix = self.probs @ lam.T
        with np.errstate(divide="ignore"):
            ll = np.log(mix).sum(axis=0)
        return np.exp(-ll / self.probs.shape[0])


class _ExpectedWer(BoundLoss):
    def __init__(self, lists: Sequence[NBestList], components: Sequence[NGramModel], scales: Scales):
        if not lists:
            raise OptimizationError("expected-WER loss without n-best lists")
        rows, tok_starts, acoustic, errors, utt_starts = [], [], [], [], []
        ref_words = 0
        for nb in lists:
            utt_starts.append(len(acoustic))
            ref_words += len(nb.reference)
            for h in nb.hypotheses:
                tok_starts.append(len(rows))
                hist = [BOS]
                for w in list(h.words) + [EOS]:
                    rows.append([m.prob(w, hist) for m in components])
                    hist.append(w)
                acoustic.append(h.acoustic_score)
                errors.append(edit_distance(h.words, nb.reference).errors)
        self.probs = np.array(rows, dtype=float)
        self.tok_starts = np.array(tok_starts)
        self.acoustic = scales.acoustic_scale * np.array(acoustic)
        self.lm_scale = scales.lm_scale
        self.errors = np.array(errors, dtype=float)
        self.utt_starts = np.array(utt_starts)
        self.utt_sizes = np.diff(np.append(self.utt_starts, len(acoustic)))
        self.ref_words = ref_words

    def batch(self, lam):
        with np.errstate(divide="ignore"):
            tok = np.log(self.probs @ lam.T)
        lm = np.add.reduceat(tok, self.tok_starts, axis=0)
        scores = self.acoustic[:, None] + self.lm_scale * lm
        top = np.maximum.reduceat(scores, self.utt_starts, axis=0)
        dead = ~np.isfinite(top)
        top = np.where(dead, 0.0, top)
        e = np.exp(scores - np.repeat(top, self.utt_sizes, axis=0))
        z = np.add.reduceat(e, self.utt_starts, axis=0)
        expected = np.add.reduceat(e * self.errors[:, None], self.utt_starts, axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            per_utt = expected / z
        # an utterance whose hypotheses all have zero LM probability cannot be scored
        per_utt = np.where(dead, np.inf, per_utt)
        return per_utt.sum(axis=0) / self.ref_words


def eval_loss(spec: LossSpec, mixture: MixtureModel) -> float:
    return spec.bind(mixture.components)(np.array(mixture.weights))


# ---------------------------------------------------------------------------
# constraint


@dataclass(frozen=True)
class ConstraintSpec:
    """Past-data loss must not exceed the baseline's own loss on that data."""

    loss: PerplexityLoss | ExpectedWerLoss
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise OptimizationError("sigma must be positive")

    @property
    def kind(self) -> str:
        return self.loss.name


def penalty_value(sigma: float, loss: float | np.ndarray, bound: float):
    if bound == math.inf:
        return np.zeros_like(loss) if isinstance(loss, np.ndarray) else 0.0
    excess = np.maximum(0.0, np.asarray(loss) - bound)
    out = sigma * excess ** 2
    return float(out) if np.ndim(out) == 0 else out


def constraint_bound(c: ConstraintSpec, components: Sequence[NGramModel]) -> float:
    """``C``: the constraint loss of the baseline-only mixture."""
    base = np.zeros(len(components))
    base[0] = 1.0
    value = c.loss.bind(components)(base)
    if not math.isfinite(value):
        raise NonFiniteLoss("baseline loss on past data is not finite", base)
    return value


def eval_penalty(c: ConstraintSpec, mixture: MixtureModel, bound: float | None = None) -> float:
    if bound is None:
        bound = constraint_bound(c, mixture.components)
    return penalty_value(c.sigma, eval_loss(c.loss, mixture), bound)


# ---------------------------------------------------------------------------
# problem / solution


@dataclass(frozen=True)
class SolverConfig:
    scan_points: int = 1001  # coarse scan before golden-section (two components)
    line_scan_points: int = 33  # coarse scan per pairwise move (more components)
    tolerance: float = 1e-4
    xtol: float = 1e-10
    max_iterations: int = 200
    max_sweeps: int = 100
    seed: int = 0  # the solver is deterministic; kept for reproducible reports


@dataclass(frozen=True)
class OptimizationProblem:
    mixture: MixtureModel
    losses: tuple[LossSpec, ...]
    constraint: ConstraintSpec | None = None
    solver: SolverConfig = SolverConfig()

    def __post_init__(self) -> None:
        if not self.losses:
            raise OptimizationError("at least one loss is required")

    @property
    def components(self) -> tuple[NGramModel, ...]:
        return self.mixture.components


@dataclass(frozen=True)
class Solution:
    weights: tuple[float, ...]
    losses: tuple[float, ...]
    constraint_loss: float | None
    bound: float | None
    penalty: float
    objective: float
    iterations: int
    converged: bool
    feasible: bool

    @property
    def lambda_app(self) -> float:
        return self.weights[1] if len(self.weights) > 1 else 0.0


class Objective:
    """Total loss plus penalty, bound to a problem's components."""

    def __init__(self, problem: OptimizationProblem):
        comps = problem.components
        self.k = len(comps)
        self.losses = [spec.bind(comps) for spec in problem.losses]
        self.constraint = problem.constraint
        if problem.constraint is not None:
            self.past = problem.constraint.loss.bind(comps)
            base = np.zeros(self.k)
            base[0] = 1.0
            self.bound = self.past(base)
            if not math.isfinite(self.bound):
                raise NonFiniteLoss("baseline loss on past data is not finite", base)
            self.sigma = problem.constraint.sigma
        else:
            self.past = None
            self.bound = math.inf
            self.sigma = 0.0
        self.evaluations = 0

    def __call__(self, lam):
        arr, single = _as_batch(lam)
        self.evaluations += len(arr)
        total = np.zeros(len(arr))
        for loss in self.losses:
            total = total + loss(arr)
        if self.past is not None:
            total = total + penalty_value(self.sigma, self.past(arr), self.bound)
        if np.any(np.isnan(total)):
            bad = arr[int(np.argmax(np.isnan(total)))]
            raise NonFiniteLoss("objective is NaN", bad)
        return float(total[0]) if single else total

    def solution(self, lam: np.ndarray, iterations: int, converged: bool) -> Solution:
        lam = np.asarray(lam, dtype=float)
        losses = tuple(float(loss(lam)) for loss in self.losses)
        if self.past is not None:
            past = float(self.past(lam))
            pen = float(penalty_value(self.sigma, past, self.bound))
            feasible = past <= self.bound * (1 + FEASIBILITY_SLACK)
            bound = self.bound
        else:
            past, pen, feasible, bound = None, 0.0, True, None
        obj = math.fsum(losses) + pen
        if not math.isfinite(obj):
            raise NonFiniteLoss("objective is not finite at the solution", lam)
        return Solution(
            weights=tuple(float(x) for x in lam),
            losses=losses,
            constraint_loss=past,
            bound=bound,
            penalty=pen,
            objective=obj,
            iterations=iterations,
            converged=converged,
            feasible=feasible,
        )


_GOLDEN = (math.sqrt(5) - 1) / 2


def line_search(
    g: Callable[[np.ndarray], np.ndarray],
    lo: float,
    hi: float,
    scan_points: int,
    xtol: float,
    max_iterations: int,
) -> tuple[float, float, int, float]:
    """Global scan of ``g`` on [lo, hi] followed by golden-section refinement
    around the best scan point. Returns (t, g(t), iterations, final bracket width)."""
    ts = np.linspace(lo, hi, scan_points)
    vals = g(ts)
    finite = np.isfinite(vals)
    if not finite.any():
        raise NonFiniteLoss("objective is infinite over the whole search interval", [lo, hi])
    i = int(np.argmin(np.where(finite, vals, np.inf)))
    best_t, best_v = float(ts[i]), float(vals[i])
    a = float(ts[max(i - 1, 0)])
    b = float(ts[min(i + 1, scan_points - 1)])
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = g(np.array([c, d]))
    it = 0
    while b - a > xtol and it < max_iterations:
        it += 1
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = float(g(np.array([c]))[0])
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = float(g(np.array([d]))[0])
    for t, v in ((c, fc), (d, fd)):
        if v < best_v:
            best_t, best_v = float(t), float(v)
    return best_t, best_v, it, b - a


def optimize(p: OptimizationProblem) -> Solution:
    obj = Objective(p)
    cfg = p.solver
    k = obj.k
    anchor = np.zeros(k)
    anchor[0] = 1.0
    if k == 1:
        return obj.solution(anchor, 0, True)
    if k == 2:
        def g(ts):
            return obj(np.stack([1.0 - ts, ts], axis=1))

        t, _, it, width = line_search(g, 0.0, 1.0, cfg.scan_points, cfg.xtol, cfg.max_iterations)
        return obj.solution(np.array([1.0 - t, t]), it, width < cfg.tolerance)
    lam, sweeps, converged = _coordinate_descent(obj, cfg)
    # never return something worse than the baseline-only anchor
    if obj(anchor) < obj(lam):
        lam = anchor
    return obj.solution(lam, sweeps, converged)


_MIN_GAIN = 1e-12
_TINY_WEIGHT = 1e-12


def _coordinate_descent(obj: Objective, cfg: SolverConfig) -> tuple[np.ndarray, int, bool]:
    """Pairwise moves on the simplex: re-split lambda_i + lambda_j between i and j."""
    k = obj.k
    lam = np.full(k, 1.0 / k)
    current = obj(lam)
    sweeps = 0
    converged = False
    while sweeps < cfg.max_sweeps:
        sweeps += 1
        biggest = 0.0
        for i in range(k):
            for j in range(i + 1, k):
                s = lam[i] + lam[j]
                if s <= 0:
                    continue

                def g(ts, i=i, j=j, s=s):
                    batch = np.repeat(lam[None, :], len(ts), axis=0)
                    batch[:, i] = ts * s
                    batch[:, j] = (1.0 - ts) * s
                    return obj(batch)

                t, v, _, _ = line_search(g, 0.0, 1.0, cfg.line_scan_points, cfg.xtol, cfg.max_iterations)
                if v < current - _MIN_GAIN * max(1.0, abs(current)):
                    new_i = t * s
                    # app weights can be tiny, so steps are measured relative to the smaller weight
                    scale = max(min(lam[i], lam[j], new_i, s - new_i), _TINY_WEIGHT)
                    biggest = max(biggest, abs(new_i - lam[i]) / scale)
                    lam = lam.copy()
                    lam[i], lam[j] = new_i, s - new_i
                    current = v
        if biggest < cfg.tolerance:
            converged = True
            break
    lam = np.clip(lam, 0.0, None)
    return lam / lam.sum(), sweeps, converged


def multi_app_problem(
    baseline: NGramModel,
    apps: Sequence[tuple[NGramModel, LossSpec]],
    constraint: ConstraintSpec | None,
    solver: SolverConfig = SolverConfig(),
) -> OptimizationProblem:
    """One component per application after the baseline; neg-squared losses target their own app."""
    if not apps:
        raise OptimizationError("at least one application is required")
    comps = (baseline,) + tuple(m for m, _ in apps)
    losses = []
    for i, (_, spec) in enumerate(apps, 1):
        if isinstance(spec, NegSquaredLoss) and spec.target is None:
            spec = replace(spec, target=i)
        losses.append(spec)
    k = len(comps)
    mixture = MixtureModel(comps, (1.0,) + (0.0,) * (k - 1))
    return OptimizationProblem(mixture, tuple(losses), constraint, solver)


def multi_app_optimize(
    baseline: NGramModel,
    apps: Sequence[tuple[NGramModel, LossSpec]],
    constraint: ConstraintSpec | None,
    solver: SolverConfig = SolverConfig(),
) -> Solution:
    return optimize(multi_app_problem(baseline, apps, constraint, solver))


def grid_search(p: OptimizationProblem, step: float = 1e-4) -> tuple[float, float]:
    """Brute-force (lambda_app, objective) over an evenly spaced grid, two components only."""
    if len(p.components) != 2:
        raise OptimizationError("grid search is for two-component problems")
    obj = Objective(p)
    n = int(round(1.0 / step)) + 1
    ts = np.linspace(0.0, 1.0, n)
    vals = obj(np.stack([1.0 - ts, ts], axis=1))
    i = int(np.argmin(vals))
    return float(ts[i]), float(vals[i])


def solution_mixture(p: OptimizationProblem, s: Solution) -> MixtureModel:
    w = np.clip(np.array(s.weights), 0.0, None)
    return MixtureModel(p.components, tuple(check_simplex(w / w.sum())))
