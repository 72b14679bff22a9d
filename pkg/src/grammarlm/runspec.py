"""Declarative optimization runs: JSON run specs, solutions and the comparison report."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .asr_eval import NBestList, Scales, expected_wer_loss, one_best_wer, read_nbest, read_references
from .lm import EvalCorpus, NGramModel, perplexity, read_arpa, read_corpus
from .mixture import MixtureModel
from .optimizer import (
    DEFAULT_SIGMA,
    ConstraintSpec,
    ExpectedWerLoss,
    LossSpec,
    NegSquaredLoss,
    OptimizationProblem,
    PerplexityLoss,
    Solution,
    SolverConfig,
    multi_app_problem,
    optimize,
)

_DATA = {
    "type": "object",
    "properties": {
        "corpus": {"type": "string"},
        "nbest": {"type": "string"},
        "references": {"type": "string"},
    },
    "dependentRequired": {"nbest": ["references"]},
    "additionalProperties": False,
}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["baseline", "apps"],
    "additionalProperties": False,
    "properties": {
        "baseline": {"type": "string"},
        "apps": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "model", "loss"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "model": {"type": "string"},
                    "loss": {
                        "type": "object",
                        "required": ["kind"],
                        "properties": {
                            "kind": {"enum": ["neg_squared", "perplexity", "expected_wer"]},
                            **_DATA["properties"],
                        },
                        "dependentRequired": _DATA["dependentRequired"],
                        "additionalProperties": False,
                    },
                    "test": _DATA,
                },
            },
        },
        "constraint": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["none", "perplexity", "expected_wer"]},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                **_DATA["properties"],
            },
            "dependentRequired": _DATA["dependentRequired"],
        },
        "past_test": _DATA,
        "scales": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lm_scale": {"type": "number", "exclusiveMinimum": 0},
                "acoustic_scale": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "scan_points": {"type": "integer", "minimum": 3},
                "line_scan_points": {"type": "integer", "minimum": 3},
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
                "xtol": {"type": "number", "exclusiveMinimum": 0},
                "max_iterations": {"type": "integer", "minimum": 1},
                "max_sweeps": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"solution": {"type": "string"}, "report": {"type": "string"}},
        },
    },
}


class RunSpecError(Exception):
    pass


@dataclass(frozen=True)
class DataRef:
    corpus: Path | None = None
    nbest: Path | None = None
    references: Path | None = None


@dataclass(frozen=True)
class AppSpec:
    name: str
    model: Path
    loss_kind: str
    loss_data: DataRef
    test: DataRef


@dataclass(frozen=True)
class RunSpec:
    baseline: Path
    apps: tuple[AppSpec, ...]
    constraint_kind: str = "perplexity"
    constraint_data: DataRef = DataRef()
    sigma: float = DEFAULT_SIGMA
    past_test: DataRef = DataRef()
    scales: Scales = Scales()
    solver: SolverConfig = SolverConfig()
    solution_path: Path | None = None
    report_path: Path | None = None

    def with_overrides(
        self, sigma: float | None = None, lm_scale: float | None = None, acoustic_scale: float | None = None
    ) -> "RunSpec":
        scales = Scales(
            self.scales.lm_scale if lm_scale is None else lm_scale,
            self.scales.acoustic_scale if acoustic_scale is None else acoustic_scale,
        )
        return replace(self, sigma=self.sigma if sigma is None else sigma, scales=scales)


def _data(obj: dict | None, base: Path) -> DataRef:
    obj = obj or {}
    return DataRef(*(base / obj[k] if k in obj else None for k in ("corpus", "nbest", "references")))


def parse_runspec(obj: Any, base: Path) -> RunSpec:
    try:
        jsonschema.validate(obj, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise RunSpecError(f"run spec invalid at {where}: {e.message}") from None
    apps = []
    for a in obj["apps"]:
        loss = a["loss"]
        ref = _data(loss, base)
        if loss["kind"] == "perplexity" and ref.corpus is None:
            raise RunSpecError(f"app {a['name']!r}: perplexity loss needs a corpus")
        if loss["kind"] == "expected_wer" and ref.nbest is None:
            raise RunSpecError(f"app {a['name']!r}: expected_wer loss needs nbest and references")
        apps.append(AppSpec(a["name"], base / a["model"], loss["kind"], ref, _data(a.get("test"), base)))
    if len({a.name for a in apps}) != len(apps):
        raise RunSpecError("app names must be unique")
    cons = obj.get("constraint", {"kind": "none"})
    cref = _data(cons, base)
    if cons["kind"] == "perplexity" and cref.corpus is None:
        raise RunSpecError("perplexity constraint needs a corpus")
    if cons["kind"] == "expected_wer" and cref.nbest is None:
        raise RunSpecError("expected_wer constraint needs nbest and references")
    out = obj.get("output", {})
    return RunSpec(
        baseline=base / obj["baseline"],
        apps=tuple(apps),
        constraint_kind=cons["kind"],
        constraint_data=cref,
        sigma=float(cons.get("sigma", DEFAULT_SIGMA)),
        past_test=_data(obj.get("past_test"), base),
        scales=Scales(**obj.get("scales", {})),
        solver=SolverConfig(**obj.get("solver", {})),
        solution_path=base / out["solution"] if "solution" in out else None,
        report_path=base / out["report"] if "report" in out else None,
    )


def load_runspec(path: str | Path) -> RunSpec:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise RunSpecError(f"{path}: not valid JSON ({e})") from None
    return parse_runspec(obj, path.parent)


# ---------------------------------------------------------------------------
# loading data


@dataclass
class _Loader:
    """Reads each file once."""

    cache: dict = field(default_factory=dict)

    def _get(self, key, fn):
        if key not in self.cache:
            self.cache[key] = fn()
        return self.cache[key]

    def model(self, path: Path) -> NGramModel:
        def load():
            with open(path, encoding="utf-8") as fh:
                return read_arpa(fh)
        return self._get(("arpa", path), load)

    def corpus(self, path: Path) -> EvalCorpus:
        def load():
            with open(path, encoding="utf-8") as fh:
                return read_corpus(fh)
        return self._get(("corpus", path), load)

    def nbest(self, nbest: Path, refs: Path) -> tuple[NBestList, ...]:
        def load():
            with open(refs, encoding="utf-8") as fh:
                references = read_references(fh)
            with open(nbest, encoding="utf-8") as fh:
                return tuple(read_nbest(fh, references))
        return self._get(("nbest", nbest, refs), load)


@dataclass(frozen=True)
class LoadedRun:
    spec: RunSpec
    problem: OptimizationProblem
    loader: _Loader

    @property
    def components(self) -> tuple[NGramModel, ...]:
        return self.problem.components


def _loss_spec(kind: str, ref: DataRef, loader: _Loader, scales: Scales) -> LossSpec:
    if kind == "neg_squared":
        return NegSquaredLoss()
    if kind == "perplexity":
        return PerplexityLoss(loader.corpus(ref.corpus))
    return ExpectedWerLoss(loader.nbest(ref.nbest, ref.references), scales)


def load_run(spec: RunSpec) -> LoadedRun:
    loader = _Loader()
    baseline = loader.model(spec.baseline)
    apps = [(loader.model(a.model), _loss_spec(a.loss_kind, a.loss_data, loader, spec.scales)) for a in spec.apps]
    constraint = None
    if spec.constraint_kind != "none":
        cl = _loss_spec(spec.constraint_kind, spec.constraint_data, loader, spec.scales)
        constraint = ConstraintSpec(cl, spec.sigma)
    problem = multi_app_problem(baseline, apps, constraint, spec.solver)
    return LoadedRun(spec, problem, loader)


def run(spec: RunSpec) -> tuple[LoadedRun, Solution]:
    loaded = load_run(spec)
    return loaded, optimize(loaded.problem)


# ---------------------------------------------------------------------------
# solution file


def solution_to_json(spec: RunSpec, s: Solution) -> str:
    obj = {
        "components": ["baseline"] + [a.name for a in spec.apps],
        "sigma": spec.sigma,
        "scales": asdict(spec.scales),
        "constraint": spec.constraint_kind,
        **asdict(s),
    }
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def solution_from_json(text: str) -> Solution:
    obj = json.loads(text)
    return Solution(
        weights=tuple(obj["weights"]),
        losses=tuple(obj["losses"]),
        constraint_loss=obj["constraint_loss"],
        bound=obj["bound"],
        penalty=obj["penalty"],
        objective=obj["objective"],
        iterations=obj["iterations"],
        converged=obj["converged"],
        feasible=obj["feasible"],
    )


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class Metrics:
    ppl: float | None = None
    wer: float | None = None
    expected_wer: float | None = None


def evaluate(scorer, ref: DataRef, loader: _Loader, scales: Scales) -> Metrics:
    ppl = wer = ewer = None
    if ref.corpus is not None:
        ppl = perplexity(scorer, loader.corpus(ref.corpus))
    if ref.nbest is not None:
        lists = loader.nbest(ref.nbest, ref.references)
        wer = one_best_wer(lists, scorer, scales)
        ewer = expected_wer_loss(lists, scorer, scales)
    return Metrics(ppl, wer, ewer)


def _num(x: float | None, fmt: str) -> str:
    if x is None:
        return "-"
    if not math.isfinite(x):
        return "inf"
    return format(x, fmt)


def _rel(new: float | None, old: float | None) -> str:
    if new is None or old is None:
        return "-"
    if old == 0:
        return "+0.0%" if new == 0 else "inf"
    return f"{100 * (new - old) / old:+.1f}%"


def render_report(loaded: LoadedRun, s: Solution) -> str:
    """Past-data and per-app PPL / WER before and after adaptation."""
    spec = loaded.spec
    comps = loaded.components
    names = ["baseline"] + [a.name for a in spec.apps]
    base = MixtureModel.baseline_only(comps)
    weights = np.clip(np.array(s.weights), 0.0, None)
    opt = MixtureModel(comps, tuple(weights / weights.sum()))
    lines = ["# interpolation weights"]
    width = max(len(n) for n in names)
    for n, w in zip(names, s.weights):
        lines.append(f"{n:<{width}}  {w:.6f}")
    lines.append("")
    lines.append("# solution")
    if spec.constraint_kind == "none":
        lines.append("constraint        none")
    else:
        lines.append(f"constraint        {spec.constraint_kind} (sigma {spec.sigma:g})")
        lines.append(f"bound C           {s.bound:.6f}")
        lines.append(f"past-data loss    {s.constraint_loss:.6f}")
        lines.append(f"penalty           {s.penalty:.6g}")
        lines.append(f"feasible          {'yes' if s.feasible else 'NO'}")
    for a, loss in zip(spec.apps, s.losses):
        lines.append(f"loss {a.name:<12} {a.loss_kind} = {loss:.6f}")
    lines.append(f"objective         {s.objective:.6f}")
    lines.append(f"iterations        {s.iterations} ({'converged' if s.converged else 'not converged'})")
    lines.append("")

    past_b = evaluate(base, spec.past_test, loaded.loader, spec.scales)
    past_o = evaluate(opt, spec.past_test, loaded.loader, spec.scales)
    header = ["", "past PPL", "past rel.WER"]
    rows = [["baseline", _num(past_b.ppl, ".2f"), "-"], ["adapted", _num(past_o.ppl, ".2f"), _rel(past_o.wer, past_b.wer)]]
    for a in spec.apps:
        header += [f"{a.name} PPL", f"{a.name} WER", f"{a.name} expWER"]
        mb = evaluate(base, a.test, loaded.loader, spec.scales)
        mo = evaluate(opt, a.test, loaded.loader, spec.scales)
        for row, m in ((rows[0], mb), (rows[1], mo)):
            row += [
                _num(m.ppl, ".2f"),
                _num(None if m.wer is None else 100 * m.wer, ".2f"),
                _num(None if m.expected_wer is None else 100 * m.expected_wer, ".2f"),
            ]
    table = [header] + rows
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines.append("# evaluation (WER in percent)")
    for r in table:
        lines.append("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip())
    return "\n".join(lines) + "\n"
