"""``grammarlm`` command line: compile, counts, train, sample, optimize, evaluate, report.

Exit codes: 0 ok, 2 bad input (parse errors, unreadable files, invalid run
spec), 3 compile error, 4 numeric failure, 5 infeasible solution.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Iterator, Sequence, TextIO

from . import counts as counts_mod
from .asr_eval import AsrEvalError, Scales, expected_wer_loss, one_best_wer, oracle_wer, read_nbest, read_references
from .counts import CountError, MalformedCounts, PruneConfig, expected_counts, read_counts, write_counts
from .grammar import CompileError, GrammarError, compile_grammar, expand_nonterminals, load_catalog, parse_grammar
from .lm import LmError, MalformedArpa, NGramModel, perplexity, read_arpa, read_corpus, train_from_counts, train_from_samples, write_arpa
from .mixture import MixtureError, load_mixture
from .optimizer import OptimizationError
from .runspec import RunSpecError, load_run, load_runspec, render_report, run, solution_from_json, solution_to_json
from .wfst import FstError, MalformedFst, UnboundNonTerminal, read_fst, sample_paths, write_fst

log = logging.getLogger("grammarlm")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_COMPILE = 3
EXIT_NUMERIC = 4
EXIT_INFEASIBLE = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@contextlib.contextmanager
def atomic_output(path: str | Path | None) -> Iterator[TextIO]:
    """Write to a temporary file next to ``path`` and rename on success; ``None`` or ``-`` is stdout."""
    if path is None or str(path) == "-":
        yield sys.stdout
        return
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _open(path: str | Path) -> TextIO:
    try:
        return open(path, encoding="utf-8")
    except OSError as e:
        raise CliError(f"cannot read {path}: {e.strerror}", EXIT_INPUT) from None


def _read_model(path: str) -> NGramModel:
    with _open(path) as fh:
        return read_arpa(fh)


# ---------------------------------------------------------------------------
# commands


def cmd_compile(args: argparse.Namespace) -> int:
    with _open(args.grammar) as fh:
        ast = parse_grammar(fh.read())
    catalogs = []
    for item in args.catalog:
        name, sep, path = item.partition("=")
        if not sep:
            raise CliError(f"--catalog expects NAME=PATH, got {item!r}", EXIT_INPUT)
        with _open(path) as fh:
            catalogs.append(load_catalog(fh, name))
    f = compile_grammar(ast, args.root, catalogs)
    if not args.keep_nonterminals:
        f = expand_nonterminals(f, catalogs)
    with atomic_output(args.out) as out:
        write_fst(f, out)
    log.info("compiled %s: %d states", args.root, f.num_states)
    return EXIT_OK


def _prune(args: argparse.Namespace) -> PruneConfig:
    if args.prune is None:
        return PruneConfig()
    if args.prune <= 0:
        return counts_mod.NO_PRUNING
    return PruneConfig(args.prune)


def cmd_counts(args: argparse.Namespace) -> int:
    with _open(args.fst) as fh:
        f = read_fst(fh)
    c = expected_counts(f, args.order, prune=_prune(args))
    with atomic_output(args.out) as out:
        write_counts(c.table, out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    katz = {"unk": args.unk}
    if args.counts:
        with _open(args.counts) as fh:
            c = read_counts(fh)
        vocab = {g[0] for g in c.table if len(g) == 1}
        model = train_from_counts(c.table, args.order, args.scale_mass, vocab=vocab, **katz)
    else:
        with _open(args.fst) as fh:
            f = read_fst(fh)
        if args.sample:
            model = train_from_samples(f, args.sample, args.seed, args.order, **katz)
        else:
            c = expected_counts(f, args.order, prune=_prune(args))
            model = train_from_counts(c.table, args.order, args.scale_mass, vocab=f.vocabulary(), **katz)
    with atomic_output(args.out) as out:
        write_arpa(model, out)
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    with _open(args.fst) as fh:
        f = read_fst(fh)
    with atomic_output(args.out) as out:
        for s in sample_paths(f, args.n, args.seed):
            out.write(" ".join(s) + "\n")
    return EXIT_OK


def _runspec(args: argparse.Namespace):
    spec = load_runspec(args.runspec)
    return spec.with_overrides(args.sigma, args.lm_scale, args.acoustic_scale)


def cmd_optimize(args: argparse.Namespace) -> int:
    spec = _runspec(args)
    loaded, sol = run(spec)
    report = render_report(loaded, sol)
    solution_path = args.solution or spec.solution_path
    if solution_path is not None:
        with atomic_output(solution_path) as out:
            out.write(solution_to_json(spec, sol))
    with atomic_output(args.report or spec.report_path) as out:
        out.write(report)
    if not sol.feasible and not args.allow_infeasible:
        print(
            f"error: solution violates the past-data constraint ({sol.constraint_loss:.6g} > {sol.bound:.6g})",
            file=sys.stderr,
        )
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    spec = _runspec(args)
    solution_path = args.solution or spec.solution_path
    if solution_path is None:
        raise CliError("no solution file given", EXIT_INPUT)
    with _open(solution_path) as fh:
        sol = solution_from_json(fh.read())
    loaded = load_run(spec)
    if len(sol.weights) != len(loaded.components):
        raise CliError("solution does not match the run spec's components", EXIT_INPUT)
    with atomic_output(args.report or spec.report_path) as out:
        out.write(render_report(loaded, sol))
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    if args.model:
        scorer = _read_model(args.model)
    else:
        with _open(args.mixture) as fh:
            scorer = load_mixture(fh, Path(args.mixture).parent)
    scales = Scales(args.lm_scale or 1.0, args.acoustic_scale or 1.0)
    lines = []
    if args.corpus:
        with _open(args.corpus) as fh:
            c = read_corpus(fh)
        lines.append(f"words\t{c.m}")
        lines.append(f"perplexity\t{perplexity(scorer, c):.6f}")
    if args.nbest:
        if not args.references:
            raise CliError("--nbest needs --references", EXIT_INPUT)
        with _open(args.references) as fh:
            refs = read_references(fh)
        with _open(args.nbest) as fh:
            lists = read_nbest(fh, refs)
        lines.append(f"utterances\t{len(lists)}")
        lines.append(f"wer\t{one_best_wer(lists, scorer, scales):.6f}")
        lines.append(f"expected_wer\t{expected_wer_loss(lists, scorer, scales):.6f}")
        lines.append(f"oracle_wer\t{oracle_wer(lists):.6f}")
    if not lines:
        raise CliError("nothing to evaluate: give --corpus and/or --nbest", EXIT_INPUT)
    with atomic_output(args.out) as out:
        out.write("\n".join(lines) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grammarlm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def out_arg(sp):
        sp.add_argument("-o", "--out", help="output file (default stdout)")

    def count_args(sp):
        sp.add_argument("--order", type=int, default=3)
        sp.add_argument("--prune", type=float, default=None,
                        help="drop partial contexts below this probability mass; 0 disables pruning")

    sp = sub.add_parser("compile", help="grammar to text FST")
    sp.add_argument("grammar")
    sp.add_argument("--root", required=True)
    sp.add_argument("--catalog", action="append", default=[], metavar="NAME=PATH")
    sp.add_argument("--keep-nonterminals", action="store_true")
    out_arg(sp)
    sp.set_defaults(func=cmd_compile)

    sp = sub.add_parser("counts", help="expected n-gram counts of an FST")
    sp.add_argument("fst")
    count_args(sp)
    out_arg(sp)
    sp.set_defaults(func=cmd_counts)

    sp = sub.add_parser("train", help="Katz model from counts, an FST, or FST samples")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--counts")
    src.add_argument("--fst")
    sp.add_argument("--sample", type=int, default=0, metavar="N", help="train on N sampled sentences (with --fst)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--scale-mass", type=float, default=counts_mod.DEFAULT_TARGET_MASS)
    sp.add_argument("--unk", action="store_true", help="add an <unk> entry")
    count_args(sp)
    out_arg(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="sample sentences from an FST")
    sp.add_argument("fst")
    sp.add_argument("-n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    out_arg(sp)
    sp.set_defaults(func=cmd_sample)

    def run_args(sp):
        sp.add_argument("runspec")
        sp.add_argument("--solution", help="solution JSON (overrides the run spec)")
        sp.add_argument("--report", help="report file (overrides the run spec; default stdout)")
        sp.add_argument("--sigma", type=float)
        sp.add_argument("--lm-scale", type=float)
        sp.add_argument("--acoustic-scale", type=float)

    sp = sub.add_parser("optimize", help="estimate interpolation weights from a run spec")
    run_args(sp)
    sp.add_argument("--allow-infeasible", action="store_true")
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("report", help="regenerate the report of a stored solution")
    run_args(sp)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("evaluate", help="perplexity and WER of a model or mixture")
    m = sp.add_mutually_exclusive_group(required=True)
    m.add_argument("--model")
    m.add_argument("--mixture", help="file of 'model_path<TAB>weight' lines")
    sp.add_argument("--corpus")
    sp.add_argument("--nbest")
    sp.add_argument("--references")
    sp.add_argument("--lm-scale", type=float)
    sp.add_argument("--acoustic-scale", type=float)
    out_arg(sp)
    sp.set_defaults(func=cmd_evaluate)
    return p


def _exit_code(e: Exception) -> int:
    if isinstance(e, CliError):
        return e.code
    if isinstance(e, (UnboundNonTerminal, CompileError)):
        return EXIT_COMPILE
    if isinstance(e, (GrammarError, MalformedArpa, MalformedFst, MalformedCounts, RunSpecError,
                      AsrEvalError, MixtureError, OSError)):
        return EXIT_INPUT
    if isinstance(e, (FstError, CountError, LmError, OptimizationError, ArithmeticError)):
        return EXIT_NUMERIC
    raise e


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("GRAMMARLM_LOG", "WARNING").upper()
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(level if isinstance(logging.getLevelName(level), int) else "WARNING")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # mapped to the exit-code contract
        code = _exit_code(e)
        print(f"error: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
