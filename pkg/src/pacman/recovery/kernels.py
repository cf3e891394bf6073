"""Latch-free replay primitives.

Replay writes straight into the table dicts: no write buffer and no locks.
Logged transactions committed once, so every op must succeed again; any
failure means the recovered state has diverged from the original and is
reported as ReplayDivergence.
"""

from __future__ import annotations

from ..errors import ReplayDivergence
from ..ir import INSERT, READ, WRITE, EvaluationError
from ..storage import TOMBSTONE


def _diverged(piece_desc: str, op, exc) -> ReplayDivergence:
    return ReplayDivergence(f"{piece_desc}: op {op.index} ({op.kind} {op.table}) failed: {exc}")


def run_ops(tables: dict, ops, env: dict, desc: str = "piece") -> None:
    """Execute compiled ops in order, evaluating guards and keys from ``env``."""
    op = None
    try:
        for op in ops:
            if op.guard is not None and op.guard(env) != op.branch:
                continue
            rows = tables[op.table]
            kind = op.kind
            if kind == READ:
                env[op.out_var] = rows.get(op.key(env))
            elif kind == WRITE:
                value = op.value(env)
                if value is None:
                    raise EvaluationError("write of null")
                rows[op.key(env)] = value
            elif kind == INSERT:
                key = op.key(env)
                if key in rows:
                    raise EvaluationError(f"duplicate key {key!r}")
                value = op.value(env)
                if value is None:
                    raise EvaluationError("insert of null")
                rows[key] = value
            else:
                key = op.key(env)
                if key not in rows:
                    raise EvaluationError(f"missing key {key!r}")
                del rows[key]
    except (EvaluationError, KeyError, TypeError) as exc:
        raise _diverged(desc, op, exc) from None


def run_keyed(tables: dict, items, env: dict, desc: str = "unit") -> None:
    """Like :func:`run_ops` for ``(op, key)`` pairs whose keys were evaluated at dispatch."""
    op = None
    try:
        for op, key in items:
            if op.guard is not None and op.guard(env) != op.branch:
                continue
            rows = tables[op.table]
            kind = op.kind
            if kind == READ:
                env[op.out_var] = rows.get(key)
            elif kind == WRITE:
                value = op.value(env)
                if value is None:
                    raise EvaluationError("write of null")
                rows[key] = value
            elif kind == INSERT:
                if key in rows:
                    raise EvaluationError(f"duplicate key {key!r}")
                value = op.value(env)
                if value is None:
                    raise EvaluationError("insert of null")
                rows[key] = value
            else:
                if key not in rows:
                    raise EvaluationError(f"missing key {key!r}")
                del rows[key]
    except (EvaluationError, KeyError, TypeError) as exc:
        raise _diverged(desc, op, exc) from None


def apply_writes(tables: dict, writes) -> None:
    """Install logical write-set rows (blind upserts and tombstones)."""
    for table, key, value in writes:
        rows = tables[table]
        if value is TOMBSTONE:
            rows.pop(key, None)
        else:
            rows[key] = value


def run_piece(tables: dict, piece) -> None:
    if piece.writes:
        apply_writes(tables, piece.writes)
    else:
        run_ops(tables, piece.ops, piece.env, f"txn {piece.commit_seq} block {piece.block}")


def run_piece_set(tables: dict, pieces) -> None:
    for piece in pieces:
        if piece.writes:
            apply_writes(tables, piece.writes)
        else:
            run_ops(tables, piece.ops, piece.env, f"txn {piece.commit_seq} block {piece.block}")

