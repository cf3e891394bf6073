import random

import pytest
from hypothesis import given, settings, strategies as st

from pacman.ir import (
    DATA, DELETE, FLOW, INSERT, READ, WRITE, DepEdge, ProcedureSyntaxError, extract_data_deps,
    extract_flow_deps, format_procedure, parse_procedure, parse_procedures,
)
from pacman.workloads.randomized import generate_source

from oracles import data_pairs, flow_pairs

TRANSFER = """
proc Transfer(src, amount) {
  dst = read(Customer, src);
  if (dst != null) {
    srcVal = read(Current, src);
    write(Current, src, srcVal - amount);
    dstVal = read(Current, dst);
    write(Current, dst, dstVal + amount);
    bonus = read(Saving, src);
    write(Saving, src, bonus + 1);
  }
}
"""


def edges(pairs, kind):
    return frozenset(DepEdge(a, b, kind) for a, b in pairs)


def test_transfer_ops_and_guard():
    ir = parse_procedure(TRANSFER)
    assert ir.name == "Transfer"
    assert ir.params == ("src", "amount")
    assert [op.kind for op in ir.ops] == [READ, READ, WRITE, READ, WRITE, READ, WRITE]
    assert [op.table for op in ir.ops] == [
        "Customer", "Current", "Current", "Current", "Current", "Saving", "Saving"
    ]
    assert ir.ops[0].guard is None
    assert all(op.guard == 0 and op.branch for op in ir.ops[1:])
    assert ir.control_edges == {(0, i) for i in range(1, 7)}


def test_transfer_flow_deps():
    ir = parse_procedure(TRANSFER)
    # define-use: dst feeds op 3's key; srcVal, dstVal, bonus feed the writes
    define_use = {(0, 3), (1, 2), (3, 4), (5, 6)}
    control = {(0, i) for i in range(1, 7)}
    assert extract_flow_deps(ir) == edges(define_use | control, FLOW)


def test_data_dep_examples():
    ir = parse_procedure("proc P(k) { a = read(T, k); write(T, k, a); b = read(T, k); }")
    assert extract_data_deps(ir) == edges({(0, 1), (1, 2)}, DATA)
    ir = parse_procedure("proc P(k) { a = read(T, k); b = read(T, k); }")
    assert extract_data_deps(ir) == frozenset()
    ir = parse_procedure("proc P(k) { write(T, k, 1); write(U, k, 2); }")
    assert extract_data_deps(ir) == frozenset()


def test_empty_procedure():
    ir = parse_procedure("proc Nop() { }")
    assert ir.ops == ()
    assert extract_flow_deps(ir) == frozenset()
    assert extract_data_deps(ir) == frozenset()


def test_else_branch_and_kinds():
    ir = parse_procedure(
        'proc P(k, v) {\n  x = read(T, k);\n  if (x == null) {\n    insert(T, k, v);\n'
        '  } else {\n    delete(T, k);\n  }\n}\n'
    )
    assert [op.kind for op in ir.ops] == [READ, INSERT, DELETE]
    assert (ir.ops[1].branch, ir.ops[2].branch) == (True, False)
    assert ir.control_edges == {(0, 1), (0, 2)}


def test_guard_on_parameter_has_no_control_edge():
    ir = parse_procedure("proc P(k, n) { if (n > 3) { write(T, k, n); } }")
    assert ir.control_edges == frozenset()
    assert extract_flow_deps(ir) == frozenset()


def test_literals_and_strings():
    ir = parse_procedure('proc P() { write(T, "a \\"b\\"", -5); write(T, 7, "x"); }')
    assert len(ir.ops) == 2
    assert ir.bind(()) == {}


def test_multiple_procedures_per_file():
    procs = parse_procedures("proc A() { }\n# comment\nproc B(x) { write(T, x, 1); }")
    assert [p.name for p in procs] == ["A", "B"]


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("proc P(k) { write(T, q, 1); }", "unknown identifier"),
        ("proc P(k) { a = read(T, k); a = read(T, k); }", "duplicate assignment"),
        ("proc P(k) { write(T, k, a); a = read(T, k); }", "used before assignment"),
        ("proc P(k) { if (k > 1) { a = read(T, k); } write(T, k, a); }", "not assigned on every path"),
        ("proc P(k) { write(T, k, 1) }", "expected"),
        ("proc P(k) { read(T, k); }", "expected"),
        ("proc P(k, k) { }", "duplicate"),
        ("proc A() { }\nproc A() { }", "duplicate procedure"),
    ],
)
def test_syntax_errors(text, fragment):
    with pytest.raises(ProcedureSyntaxError) as info:
        parse_procedures(text)
    assert fragment in str(info.value)


def test_syntax_error_position():
    with pytest.raises(ProcedureSyntaxError) as info:
        parse_procedure("proc P(k) {\n  write(T, k, 1);\n  write(T, k, nope);\n}")
    assert info.value.line == 3
    assert info.value.col > 1


def test_nested_if_rejected():
    with pytest.raises(ProcedureSyntaxError):
        parse_procedure("proc P(k) { if (k > 1) { if (k > 2) { write(T, k, 1); } } }")


def test_bind_arity():
    ir = parse_procedure(TRANSFER)
    assert ir.bind(("a", 1)) == {"src": "a", "amount": 1}
    with pytest.raises(ValueError):
        ir.bind(("a",))


def test_format_round_trip_transfer():
    ir = parse_procedure(TRANSFER)
    again = parse_procedure(format_procedure(ir))
    assert again == ir


def random_procedure(seed):
    return parse_procedure(generate_source(random.Random(seed), "P", ("A", "B"), max_ops=8))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_flow_deps_match_brute_force(seed):
    ir = random_procedure(seed)
    flow = extract_flow_deps(ir)
    assert flow == edges(flow_pairs(ir), FLOW)
    assert all(e.from_op < e.to_op for e in flow)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_data_deps_match_brute_force(seed):
    ir = random_procedure(seed)
    assert extract_data_deps(ir) == edges(data_pairs(ir), DATA)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_format_round_trip(seed):
    ir = random_procedure(seed)
    assert parse_procedure(format_procedure(ir)) == ir


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32))
def test_extraction_is_deterministic(seed):
    a, b = random_procedure(seed), random_procedure(seed)
    assert extract_flow_deps(a) == extract_flow_deps(b)
    assert extract_data_deps(a) == extract_data_deps(b)
