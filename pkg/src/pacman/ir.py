"""Stored-procedure intermediate representation.

A procedure is a named, parameterized, loop-free sequence of table
operations.  Source text looks like::

    proc Transfer(src, amount) {
        dst = read(Customer, src);
        if (dst != null) {
            srcVal = read(Current, src);
            write(Current, src, srcVal - amount);
        }
    }

See ``docs/procedure-language.md`` for the full grammar.  Besides parsing,
this module extracts the two dependency relations the static analysis is
built on: flow dependencies (define-use and control) and data dependencies
(same table, at least one modification).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Iterable

READ = "read"
WRITE = "write"
INSERT = "insert"
DELETE = "delete"
MODIFYING = frozenset({WRITE, INSERT, DELETE})

FLOW = "flow"
DATA = "data"

Bindings = dict


class ProcedureSyntaxError(ValueError):
    """Raised for malformed or semantically invalid procedure source."""

    def __init__(self, message: str, line: int, col: int):
        self.line = line
        self.col = col
        super().__init__(f"{message} (line {line}, col {col})")


class EvaluationError(Exception):
    """Expression evaluation failed, e.g. arithmetic on a missing (null) value."""


# ---------------------------------------------------------------------------
# expressions


class Expr:
    def variables(self) -> frozenset[str]:
        """Local variables referenced by this expression."""
        return frozenset()

    def compile(self) -> Callable[[Bindings], Any]:
        raise NotImplementedError

    def evaluate(self, env: Bindings) -> Any:
        return self.compile()(env)


@dataclass(frozen=True)
class Lit(Expr):
    value: int | str

    def compile(self):
        value = self.value
        return lambda env: value

    def __str__(self):
        if isinstance(self.value, str):
            escaped = self.value.replace("\\", "\\\\").replace('"', '\\"')
            return f'"{escaped}"'
        return str(self.value)


@dataclass(frozen=True)
class Null(Expr):
    def compile(self):
        return lambda env: None

    def __str__(self):
        return "null"


@dataclass(frozen=True)
class Param(Expr):
    name: str

    def compile(self):
        name = self.name
        return lambda env: env[name]

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Var(Expr):
    name: str

    def variables(self):
        return frozenset({self.name})

    def compile(self):
        name = self.name
        return lambda env: env[name]

    def __str__(self):
        return self.name


def _int_operand(value):
    if value is None:
        raise EvaluationError("arithmetic on a null value (read of absent key)")
    if type(value) is not int:
        raise EvaluationError(f"arithmetic on non-integer value {value!r}")
    return value


@dataclass(frozen=True)
class BinOp(Expr):
    op: str  # "+" or "-"
    left: Expr
    right: Expr

    def variables(self):
        return self.left.variables() | self.right.variables()

    def compile(self):
        lf, rf = self.left.compile(), self.right.compile()
        if self.op == "+":
            def run(env):
                a, b = lf(env), rf(env)
                if type(a) is int and type(b) is int:
                    return a + b
                return _int_operand(a) + _int_operand(b)
        else:
            def run(env):
                a, b = lf(env), rf(env)
                if type(a) is int and type(b) is int:
                    return a - b
                return _int_operand(a) - _int_operand(b)
        return run

    def __str__(self):
        return f"({self.left} {self.op} {self.right})"


_ORDERING = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


@dataclass(frozen=True)
class Compare(Expr):
    """Guard predicate.  ``==``/``!=`` accept null operands; orderings need ints."""

    op: str
    left: Expr
    right: Expr

    def variables(self):
        return self.left.variables() | self.right.variables()

    def compile(self):
        lf, rf = self.left.compile(), self.right.compile()
        if self.op == "==":
            return lambda env: lf(env) == rf(env)
        if self.op == "!=":
            return lambda env: lf(env) != rf(env)
        cmp = _ORDERING[self.op]
        return lambda env: cmp(_int_operand(lf(env)), _int_operand(rf(env)))

    def __str__(self):
        return f"{self.left} {self.op} {self.right}"


# ---------------------------------------------------------------------------
# operations and procedures


@dataclass(frozen=True)
class Guard:
    cond: Compare
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Operation:
    index: int
    kind: str
    table: str
    key: Expr
    value: Expr | None = None
    out_var: str | None = None
    guard: int | None = None  # index into ProcedureIR.guards
    branch: bool = True  # run when the guard evaluates to this

    def uses(self) -> frozenset[str]:
        used = self.key.variables()
        if self.value is not None:
            used |= self.value.variables()
        return used

    @property
    def modifies(self) -> bool:
        return self.kind in MODIFYING

    def __str__(self):
        if self.kind == READ:
            return f"{self.out_var} = read({self.table}, {self.key})"
        if self.kind == DELETE:
            return f"delete({self.table}, {self.key})"
        return f"{self.kind}({self.table}, {self.key}, {self.value})"


@dataclass(frozen=True)
class DepEdge:
    from_op: int
    to_op: int
    kind: str


@dataclass(frozen=True)
class CompiledOp:
    """Closure-compiled form of an :class:`Operation` used by the executors."""

    index: int
    kind: str
    table: str
    key: Callable[[Bindings], Any]
    value: Callable[[Bindings], Any] | None
    out_var: str | None
    guard: Callable[[Bindings], bool] | None
    branch: bool


@dataclass(frozen=True)
class ProcedureIR:
    name: str
    params: tuple[str, ...]
    ops: tuple[Operation, ...]
    control_edges: frozenset[tuple[int, int]] = frozenset()
    guards: tuple[Guard, ...] = ()

    def __post_init__(self):
        for i, op in enumerate(self.ops):
            if op.index != i:
                raise ValueError(f"{self.name}: op indexes must be dense, got {op.index} at {i}")
        n = len(self.ops)
        for guard_op, guarded in self.control_edges:
            if not (0 <= guard_op < guarded < n):
                raise ValueError(f"{self.name}: bad control edge {(guard_op, guarded)}")

    @cached_property
    def definitions(self) -> dict[str, int]:
        """Local variable -> index of the read that defines it."""
        return {op.out_var: op.index for op in self.ops if op.out_var is not None}

    @cached_property
    def tables(self) -> frozenset[str]:
        return frozenset(op.table for op in self.ops)

    @cached_property
    def compiled(self) -> tuple[CompiledOp, ...]:
        guards = [g.cond.compile() for g in self.guards]
        return tuple(
            CompiledOp(
                index=op.index,
                kind=op.kind,
                table=op.table,
                key=op.key.compile(),
                value=op.value.compile() if op.value is not None else None,
                out_var=op.out_var,
                guard=guards[op.guard] if op.guard is not None else None,
                branch=op.branch,
            )
            for op in self.ops
        )

    def guard_variables(self, op: Operation) -> frozenset[str]:
        if op.guard is None:
            return frozenset()
        return self.guards[op.guard].cond.variables()

    def bind(self, args) -> Bindings:
        """Fresh environment with parameters bound; raises on arity mismatch."""
        if len(args) != len(self.params):
            raise ValueError(
                f"{self.name} expects {len(self.params)} argument(s), got {len(args)}"
            )
        return dict(zip(self.params, args))


def extract_flow_deps(ir: ProcedureIR) -> frozenset[DepEdge]:
    """Define-use edges plus control edges, all pointing forward in program order."""
    edges = set()
    defs = ir.definitions
    for op in ir.ops:
        for var in op.uses():
            edges.add(DepEdge(defs[var], op.index, FLOW))
    for guard_op, guarded in ir.control_edges:
        edges.add(DepEdge(guard_op, guarded, FLOW))
    return frozenset(edges)


def extract_data_deps(ir: ProcedureIR) -> frozenset[DepEdge]:
    """Pairs of ops on the same table where at least one modifies it."""
    edges = set()
    ops = ir.ops
    for i, a in enumerate(ops):
        for b in ops[i + 1:]:
            if a.table == b.table and (a.modifies or b.modifies):
                edges.add(DepEdge(a.index, b.index, DATA))
    return frozenset(edges)


# ---------------------------------------------------------------------------
# parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<int>\d+)
  | (?P<str>"(?:[^"\\\n]|\\.)*")
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>==|!=|<=|>=|[-+(){},;=<>])
    """,
    re.VERBOSE,
)

KEYWORDS = frozenset({"proc", "read", "write", "insert", "delete", "if", "else", "null"})


@dataclass(frozen=True)
class _Token:
    kind: str  # int, str, ident, op, eof
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ProcedureSyntaxError(
                f"unexpected character {text[pos]!r}", line, pos - line_start + 1
            )
        kind = m.lastgroup
        col = pos - line_start + 1
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            tokens.append(_Token(kind, m.group(), line, col))
        pos = m.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0

    # -- token helpers
    def peek(self, offset=0) -> _Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def error(self, message, tok=None):
        tok = tok or self.peek()
        return ProcedureSyntaxError(message, tok.line, tok.col)

    def expect(self, text) -> _Token:
        tok = self.peek()
        if tok.text != text or tok.kind == "str":
            found = tok.text or "end of input"
            raise self.error(f"expected {text!r}, found {found!r}")
        return self.advance()

    def expect_ident(self, what="identifier") -> _Token:
        tok = self.peek()
        if tok.kind != "ident" or tok.text in KEYWORDS:
            raise self.error(f"expected {what}, found {tok.text or 'end of input'!r}")
        return self.advance()

    # -- grammar
    def parse_program(self) -> list[ProcedureIR]:
        procs = []
        while self.peek().kind != "eof":
            procs.append(self.parse_proc())
        return procs

    def parse_proc(self) -> ProcedureIR:
        self.expect("proc")
        name = self.expect_ident("procedure name").text
        self.expect("(")
        params = []
        if self.peek().text != ")":
            while True:
                tok = self.expect_ident("parameter name")
                if tok.text in params:
                    raise self.error(f"duplicate parameter {tok.text!r}", tok)
                params.append(tok.text)
                if self.peek().text != ",":
                    break
                self.advance()
        self.expect(")")
        self.params = set(params)
        self.ops: list[Operation] = []
        self.guards: list[Guard] = []
        self.control: set[tuple[int, int]] = set()
        self.assigned: set[str] = set()
        self.later = self._assignments_ahead()
        self.expect("{")
        self.parse_body(scope=set(), guard=None)
        self.expect("}")
        return ProcedureIR(
            name=name,
            params=tuple(params),
            ops=tuple(self.ops),
            control_edges=frozenset(self.control),
            guards=tuple(self.guards),
        )

    def _assignments_ahead(self) -> set[str]:
        """Names assigned anywhere in the body that starts at the current token."""
        names, depth, i = set(), 0, self.pos
        while i < len(self.tokens) - 1:
            tok = self.tokens[i]
            if tok.text == "{" and tok.kind == "op":
                depth += 1
            elif tok.text == "}" and tok.kind == "op":
                depth -= 1
                if depth == 0:
                    break
            elif tok.kind == "ident" and self.tokens[i + 1].text == "=":
                names.add(tok.text)
            i += 1
        return names

    def parse_body(self, scope: set[str], guard):
        while self.peek().text != "}":
            if self.peek().kind == "eof":
                raise self.error("unexpected end of input, missing '}'")
            self.parse_stmt(scope, guard)

    def parse_stmt(self, scope: set[str], guard):
        tok = self.peek()
        if tok.kind == "ident" and tok.text == "if":
            if guard is not None:
                raise self.error("nested if statements are not supported", tok)
            self.parse_if(scope)
            return
        if tok.kind == "ident" and tok.text in ("write", "insert"):
            self.advance()
            self.expect("(")
            table = self.expect_ident("table name").text
            self.expect(",")
            key = self.parse_expr(scope)
            self.expect(",")
            value = self.parse_expr(scope)
            self.expect(")")
            self.expect(";")
            self.add_op(tok.text, table, key, value, None, guard)
            return
        if tok.kind == "ident" and tok.text == "delete":
            self.advance()
            self.expect("(")
            table = self.expect_ident("table name").text
            self.expect(",")
            key = self.parse_expr(scope)
            self.expect(")")
            self.expect(";")
            self.add_op(DELETE, table, key, None, None, guard)
            return
        if tok.kind == "ident" and tok.text not in KEYWORDS and self.peek(1).text == "=":
            var = self.advance()
            self.advance()
            if var.text in self.params:
                raise self.error(f"cannot assign to parameter {var.text!r}", var)
            if var.text in self.assigned:
                raise self.error(f"duplicate assignment to {var.text!r}", var)
            self.expect("read")
            self.expect("(")
            table = self.expect_ident("table name").text
            self.expect(",")
            key = self.parse_expr(scope)
            self.expect(")")
            self.expect(";")
            self.add_op(READ, table, key, None, var.text, guard)
            self.assigned.add(var.text)
            scope.add(var.text)
            return
        raise self.error(f"unexpected {tok.text or 'end of input'!r}, expected a statement")

    def add_op(self, kind, table, key, value, out_var, guard):
        index = len(self.ops)
        guard_index, branch = (None, True) if guard is None else guard
        self.ops.append(Operation(index, kind, table, key, value, out_var, guard_index, branch))
        if guard_index is not None:
            for var in self.guards[guard_index].cond.variables():
                self.control.add((self.defined_at[var], index))

    @property
    def defined_at(self):
        return {op.out_var: op.index for op in self.ops if op.out_var is not None}

    def parse_if(self, scope: set[str]):
        tok = self.advance()
        self.expect("(")
        cond = self.parse_cond(scope)
        self.expect(")")
        self.guards.append(Guard(cond, tok.line))
        index = len(self.guards) - 1
        self.expect("{")
        self.parse_body(set(scope), (index, True))
        self.expect("}")
        if self.peek().kind == "ident" and self.peek().text == "else":
            self.advance()
            self.expect("{")
            self.parse_body(set(scope), (index, False))
            self.expect("}")

    def parse_cond(self, scope) -> Compare:
        left = self.parse_expr(scope, allow_null=True)
        tok = self.peek()
        if tok.text not in ("==", "!=", "<", "<=", ">", ">="):
            raise self.error(f"expected comparison operator, found {tok.text!r}")
        self.advance()
        right = self.parse_expr(scope, allow_null=True)
        if tok.text not in ("==", "!=") and (isinstance(left, Null) or isinstance(right, Null)):
            raise self.error("null can only be compared with == or !=", tok)
        return Compare(tok.text, left, right)

    def parse_expr(self, scope, allow_null=False) -> Expr:
        if allow_null and self.peek().text == "null" and self.peek().kind == "ident":
            self.advance()
            return Null()
        expr = self.parse_term(scope)
        while self.peek().text in ("+", "-") and self.peek().kind == "op":
            op = self.advance().text
            expr = BinOp(op, expr, self.parse_term(scope))
        return expr

    def parse_term(self, scope) -> Expr:
        tok = self.peek()
        if tok.kind == "int":
            self.advance()
            return Lit(int(tok.text))
        if tok.kind == "op" and tok.text == "-" and self.peek(1).kind == "int":
            self.advance()
            return Lit(-int(self.advance().text))
        if tok.kind == "str":
            self.advance()
            return Lit(_unescape(tok.text[1:-1]))
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            expr = self.parse_expr(scope)
            self.expect(")")
            return expr
        if tok.kind == "ident":
            if tok.text == "null":
                raise self.error("null is only allowed in if conditions", tok)
            if tok.text in KEYWORDS:
                raise self.error(f"unexpected keyword {tok.text!r}", tok)
            self.advance()
            if tok.text in self.params:
                return Param(tok.text)
            if tok.text in scope:
                return Var(tok.text)
            if tok.text in self.assigned:
                raise self.error(
                    f"variable {tok.text!r} is not assigned on every path to this use", tok
                )
            if tok.text in self.later:
                raise self.error(f"variable {tok.text!r} used before assignment", tok)
            raise self.error(f"unknown identifier {tok.text!r}", tok)
        raise self.error(f"expected expression, found {tok.text or 'end of input'!r}")


def _unescape(body: str) -> str:
    return re.sub(r"\\(.)", r"\1", body)


def parse_procedure(text: str) -> ProcedureIR:
    """Parse exactly one procedure from ``text``."""
    procs = parse_procedures(text)
    if len(procs) != 1:
        raise ProcedureSyntaxError(f"expected one procedure, found {len(procs)}", 1, 1)
    return procs[0]


def parse_procedures(text: str) -> list[ProcedureIR]:
    """Parse every procedure in ``text`` (a file may hold several)."""
    procs = _Parser(text).parse_program()
    seen = set()
    for p in procs:
        if p.name in seen:
            raise ProcedureSyntaxError(f"duplicate procedure {p.name!r}", 1, 1)
        seen.add(p.name)
    return procs


def format_procedure(ir: ProcedureIR) -> str:
    """Render ``ir`` back to source text (round-trips through the parser)."""
    lines = [f"proc {ir.name}({', '.join(ir.params)}) {{"]
    open_guard = None
    for op in ir.ops:
        state = None if op.guard is None else (op.guard, op.branch)
        if state != open_guard:
            if open_guard is not None:
                lines.append("  }")
            if state is not None:
                cond = ir.guards[op.guard].cond
                if open_guard is not None and open_guard[0] == op.guard and not op.branch:
                    lines[-1] = "  } else {"
                else:
                    lines.append(f"  if ({cond}) {{" if op.branch else f"  if ({cond}) {{ }} else {{")
            open_guard = state
        indent = "    " if state is not None else "  "
        lines.append(f"{indent}{op};")
    if open_guard is not None:
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def load_procedures(paths: Iterable) -> list[ProcedureIR]:
    procs = []
    for path in paths:
        with open(path, encoding="utf-8") as f:
            procs.extend(parse_procedures(f.read()))
    names = [p.name for p in procs]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise ValueError(f"duplicate procedure names: {sorted(dupes)}")
    return procs
