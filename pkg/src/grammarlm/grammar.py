"""Thrax-flavoured grammar DSL: parsing, catalogs, and compilation to FSTs.

Grammar syntax::

    # comment
    action = ("[prepare]" | "[cook]":2 | "[bake]");
    food_or_drink = (["food"] | DISH_NAME);
    cook_dish = (i_want_to action food_or_drink);

* whitespace sequences, ``|`` alternates, parentheses group;
* ``"word"`` / ``"[word]"`` are literals (the brackets inside quotes are
  stripped; a quoted string with spaces is a word sequence);
* ``[expr]`` and ``expr?`` are optional;
* ``:w`` after an alternation branch gives it weight ``w``;
* lower/mixed-case identifiers refer to other rules and are inlined,
  ALL-CAPS identifiers are non-terminals filled from catalogs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, TextIO, Union

from .wfst import EPSILON, FstBuilder, NonTerminal, WeightedFst, replace, union_of_phrases

OPTIONAL_WEIGHT = 0.5


class GrammarError(Exception):
    pass


class GrammarSyntaxError(GrammarError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{line}:{column}: {message}")
        self.line = line
        self.column = column


class DuplicateRule(GrammarError):
    pass


class UnresolvedReference(GrammarError):
    pass


class CyclicReference(GrammarError):
    pass


class CompileError(GrammarError):
    pass


class CatalogError(GrammarError):
    pass


class EmptyCatalog(CatalogError):
    pass


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Literal:
    word: str


@dataclass(frozen=True)
class RuleRef:
    name: str


@dataclass(frozen=True)
class NonTerminalRef:
    name: str


@dataclass(frozen=True)
class Sequence:
    items: tuple["Expression", ...]


@dataclass(frozen=True)
class Alternation:
    branches: tuple[tuple["Expression", Union[float, None]], ...]


@dataclass(frozen=True)
class OptionalExpr:
    expr: "Expression"


Expression = Union[Literal, RuleRef, NonTerminalRef, Sequence, Alternation, OptionalExpr]


@dataclass(frozen=True)
class GrammarAst:
    rules: dict[str, Expression]

    def nonterminals(self) -> set[str]:
        found: set[str] = set()
        for expr in self.rules.values():
            _walk_nonterminals(expr, found)
        return found


def _walk_nonterminals(expr: Expression, found: set[str]) -> None:
    if isinstance(expr, NonTerminalRef):
        found.add(expr.name)
    elif isinstance(expr, Sequence):
        for item in expr.items:
            _walk_nonterminals(item, found)
    elif isinstance(expr, Alternation):
        for branch, _ in expr.branches:
            _walk_nonterminals(branch, found)
    elif isinstance(expr, OptionalExpr):
        _walk_nonterminals(expr.expr, found)


def _rule_refs(expr: Expression) -> list[str]:
    if isinstance(expr, RuleRef):
        return [expr.name]
    if isinstance(expr, Sequence):
        return [r for item in expr.items for r in _rule_refs(item)]
    if isinstance(expr, Alternation):
        return [r for branch, _ in expr.branches for r in _rule_refs(branch)]
    if isinstance(expr, OptionalExpr):
        return _rule_refs(expr.expr)
    return []


def is_nonterminal_name(name: str) -> bool:
    return name.isupper()


# ---------------------------------------------------------------------------
# tokenizer / parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<string>"[^"\n]*")
  | (?P<number>\d+(?:\.\d*)?(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[=;|()\[\]:?])
    """,
    re.VERBOSE,
)


@dataclass
class _Token:
    kind: str
    value: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    line, line_start = 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise GrammarSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        value = m.group()
        if kind not in ("ws", "comment"):
            tokens.append(_Token(kind, value, line, pos - line_start + 1))
        nl = value.count("\n")
        if nl:
            line += nl
            line_start = pos + value.rindex("\n") + 1
        pos = m.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


def _literal_words(quoted: str) -> list[str]:
    body = quoted[1:-1]
    return [w.strip("[]") for w in body.split() if w.strip("[]")]


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def next(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str) -> _Token:
        tok = self.next()
        if tok.value != value or tok.kind == "string":
            shown = tok.value or "end of input"
            raise GrammarSyntaxError(f"expected {value!r}, found {shown!r}", tok.line, tok.col)
        return tok

    def error(self, message: str) -> GrammarSyntaxError:
        tok = self.peek()
        return GrammarSyntaxError(message, tok.line, tok.col)

    def rules(self) -> list[tuple[_Token, Expression]]:
        out = []
        while self.peek().kind != "eof":
            name = self.next()
            if name.kind != "ident":
                raise GrammarSyntaxError(f"expected rule name, found {name.value!r}", name.line, name.col)
            self.expect("=")
            expr = self.alternation()
            self.expect(";")
            out.append((name, expr))
        return out

    def alternation(self) -> Expression:
        branches = [self.branch()]
        while self.peek().value == "|" and self.peek().kind == "punct":
            self.next()
            branches.append(self.branch())
        if len(branches) == 1 and branches[0][1] is None:
            return branches[0][0]
        return Alternation(tuple(branches))

    def branch(self) -> tuple[Expression, float | None]:
        seq = self.sequence()
        weight = None
        if self.peek().value == ":" and self.peek().kind == "punct":
            self.next()
            tok = self.next()
            if tok.kind != "number":
                raise GrammarSyntaxError(f"expected weight after ':', found {tok.value!r}", tok.line, tok.col)
            weight = float(tok.value)
        return seq, weight

    def sequence(self) -> Expression:
        items: list[Expression] = []
        while True:
            tok = self.peek()
            if tok.kind in ("string", "ident") or tok.value in ("(", "["):
                items.extend(self.postfix())
            else:
                break
        if not items:
            raise self.error("empty expression")
        return items[0] if len(items) == 1 else Sequence(tuple(items))

    def postfix(self) -> list[Expression]:
        atoms = self.atom()
        if self.peek().value == "?" and self.peek().kind == "punct":
            self.next()
            inner = atoms[0] if len(atoms) == 1 else Sequence(tuple(atoms))
            return [OptionalExpr(inner)]
        return atoms

    def atom(self) -> list[Expression]:
        tok = self.next()
        if tok.kind == "string":
            words = _literal_words(tok.value)
            if not words:
                raise GrammarSyntaxError("empty literal", tok.line, tok.col)
            return [Literal(w) for w in words]
        if tok.kind == "ident":
            if is_nonterminal_name(tok.value):
                return [NonTerminalRef(tok.value)]
            return [RuleRef(tok.value)]
        if tok.value == "(":
            expr = self.alternation()
            self.expect(")")
            return [expr]
        if tok.value == "[":
            expr = self.alternation()
            self.expect("]")
            return [OptionalExpr(expr)]
        raise GrammarSyntaxError(f"unexpected token {tok.value!r}", tok.line, tok.col)


def parse_grammar(text: str) -> GrammarAst:
    parsed = _Parser(text).rules()
    rules: dict[str, Expression] = {}
    for name_tok, expr in parsed:
        if name_tok.value in rules:
            raise DuplicateRule(f"{name_tok.line}:{name_tok.col}: rule {name_tok.value!r} defined twice")
        rules[name_tok.value] = expr
    for name, expr in rules.items():
        for ref in _rule_refs(expr):
            if ref not in rules:
                raise UnresolvedReference(f"rule {name!r} refers to undefined rule {ref!r}")
    _check_acyclic(rules)
    return GrammarAst(rules)


def _check_acyclic(rules: Mapping[str, Expression]) -> None:
    state: dict[str, int] = {}  # 1 = on stack, 2 = done

    def visit(name: str, path: list[str]) -> None:
        if state.get(name) == 2:
            return
        if state.get(name) == 1:
            cycle = path[path.index(name):] + [name]
            raise CyclicReference("cyclic rule reference: " + " -> ".join(cycle))
        state[name] = 1
        for ref in _rule_refs(rules[name]):
            visit(ref, path + [name])
        state[name] = 2

    for name in rules:
        visit(name, [])


# ---------------------------------------------------------------------------
# catalogs


@dataclass(frozen=True)
class Catalog:
    name: str
    entries: tuple[tuple[tuple[str, ...], float], ...]

    def to_fst(self) -> WeightedFst:
        return union_of_phrases(self.entries)


def load_catalog(stream: TextIO | Iterable[str], name: str) -> Catalog:
    """Read ``phrase words[<TAB>weight]`` lines; weight defaults to 1."""
    entries = []
    for lineno, raw in enumerate(stream, 1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) > 2:
            raise CatalogError(f"{name}:{lineno}: malformed line {line!r}")
        words = tuple(parts[0].split())
        if not words:
            raise CatalogError(f"{name}:{lineno}: empty phrase")
        weight = 1.0
        if len(parts) == 2:
            try:
                weight = float(parts[1])
            except ValueError:
                raise CatalogError(f"{name}:{lineno}: bad weight {parts[1]!r}") from None
            if weight < 0 or weight != weight:
                raise CatalogError(f"{name}:{lineno}: negative weight {weight}")
        entries.append((words, weight))
    if not entries:
        raise EmptyCatalog(f"catalog {name!r} is empty")
    if not any(w > 0 for _, w in entries):
        raise CatalogError(f"catalog {name!r} has no positive weight")
    return Catalog(name, tuple(entries))


# ---------------------------------------------------------------------------
# compilation


def branch_probabilities(weights: list[float | None]) -> list[float]:
    """Normalize alternation weights; unweighted branches get the mean explicit weight."""
    explicit = [w for w in weights if w is not None]
    fill = sum(explicit) / len(explicit) if explicit else 1.0
    raw = [fill if w is None else w for w in weights]
    total = sum(raw)
    if total <= 0:
        raise CompileError("alternation has zero total weight")
    return [w / total for w in raw]


class _Compiler:
    def __init__(self, ast: GrammarAst, catalogs: Mapping[str, Catalog], inline: bool):
        self.ast = ast
        self.catalogs = catalogs
        self.inline = inline
        self.b = FstBuilder()

    def build(self, expr: Expression, src: int, dst: int, weight: float) -> None:
        # Connect src to dst; `weight` multiplies the first arc of every path.
        b = self.b
        if isinstance(expr, Literal):
            b.add_arc(src, expr.word, weight, dst)
        elif isinstance(expr, RuleRef):
            self.build(self.ast.rules[expr.name], src, dst, weight)
        elif isinstance(expr, NonTerminalRef):
            if self.inline:
                cat = self.catalogs.get(expr.name)
                if cat is None:
                    raise CompileError(f"no catalog for non-terminal {expr.name!r}")
                self.build(_catalog_expr(cat), src, dst, weight)
            else:
                b.add_arc(src, NonTerminal(expr.name), weight, dst)
        elif isinstance(expr, Sequence):
            s = src
            last = len(expr.items) - 1
            for i, item in enumerate(expr.items):
                t = dst if i == last else b.add_state()
                self.build(item, s, t, weight if i == 0 else 1.0)
                s = t
        elif isinstance(expr, Alternation):
            probs = branch_probabilities([w for _, w in expr.branches])
            for (branch, _), p in zip(expr.branches, probs):
                if p > 0:
                    self.build(branch, src, dst, weight * p)
        elif isinstance(expr, OptionalExpr):
            self.build(expr.expr, src, dst, weight * OPTIONAL_WEIGHT)
            b.add_arc(src, EPSILON, weight * (1 - OPTIONAL_WEIGHT), dst)
        else:  # pragma: no cover
            raise TypeError(f"unknown expression {expr!r}")


def _catalog_expr(cat: Catalog) -> Expression:
    branches = []
    for words, w in cat.entries:
        seq = Literal(words[0]) if len(words) == 1 else Sequence(tuple(Literal(x) for x in words))
        branches.append((seq, w))
    return Alternation(tuple(branches))


def compile_grammar(
    ast: GrammarAst,
    root: str,
    catalogs: Iterable[Catalog] | Mapping[str, Catalog] = (),
    inline_catalogs: bool = False,
) -> WeightedFst:
    """Compile ``root`` to an acceptor; rule references are inlined.

    With ``inline_catalogs`` every non-terminal is expanded from its catalog
    during compilation, otherwise it stays as a non-terminal arc (see
    :func:`expand_nonterminals`).
    """
    if root not in ast.rules:
        raise CompileError(f"unknown root rule {root!r}")
    if not isinstance(catalogs, Mapping):
        catalogs = {c.name: c for c in catalogs}
    c = _Compiler(ast, catalogs, inline_catalogs)
    start = c.b.add_state()
    end = c.b.add_state()
    c.b.set_final(end)
    c.build(ast.rules[root], start, end, 1.0)
    return _renumber(c.b.build())


def _renumber(f: WeightedFst) -> WeightedFst:
    """Canonical numbering: breadth-first from the start, arcs in insertion order."""
    mapping = {f.start: 0}
    queue = [f.start]
    for s in queue:
        for arc in f.arcs[s]:
            if arc.next not in mapping:
                mapping[arc.next] = len(mapping)
                queue.append(arc.next)
    b = FstBuilder()
    for _ in mapping:
        b.add_state()
    for old in queue:
        for arc in f.arcs[old]:
            b.add_arc(mapping[old], arc.label, arc.weight, mapping[arc.next])
        if old in f.finals:
            b.set_final(mapping[old], f.finals[old])
    return b.build()


def expand_nonterminals(
    f: WeightedFst,
    catalogs: Iterable[Catalog] | Mapping[str, Catalog],
    max_depth: int = 16,
) -> WeightedFst:
    if not isinstance(catalogs, Mapping):
        catalogs = {c.name: c for c in catalogs}
    return replace(f, {name: cat.to_fst() for name, cat in catalogs.items()}, max_depth)
