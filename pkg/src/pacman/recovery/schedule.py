"""Per-batch execution schedules.

Every committed command entry is instantiated into one piece per block that
holds a slice of its procedure; the pieces of one block form that block's
piece-set, ordered by commit position.  Piece-sets inherit the block edges of
the global dependency graph.

Logical (ad-hoc) entries become write-only pieces.  Each written row goes to
the block whose slices touch its table.  Rows of tables no procedure touches
go to an extra catch-all block (id ``len(gdg.blocks)``) that no procedure
reads.  A row of a table touched by several blocks (only possible when all
of them merely read it) cannot be placed in any one block, so the batch is
cut there: the entry becomes its own single-piece segment that every block
waits for, and pieces after it start a new segment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from ..analysis import GlobalDependencyGraph
from ..durability import AdHoc, LogBatch
from ..errors import UnrecoverableLogError
from ..ir import CompiledOp


@dataclass(slots=True)
class Piece:
    """P_b^t: the ops of one transaction that fall in block ``block``."""

    ordinal: int  # position of the entry in its batch
    block: int
    commit_seq: int
    proc: str | None  # None for ad-hoc pieces
    ops: tuple  # CompiledOp, program order
    env: dict  # bindings shared by all pieces of the transaction
    writes: tuple = ()  # ad-hoc rows (table, key, value | TOMBSTONE)

    @property
    def op_indexes(self) -> tuple[int, ...]:
        return tuple(op.index for op in self.ops)

    def __repr__(self):
        what = self.proc if self.proc is not None else f"adhoc[{len(self.writes)}]"
        return f"P_{self.block}^{self.ordinal}({what})"


@dataclass(slots=True)
class PieceSet:
    block: int
    pieces: list = field(default_factory=list)

    def __len__(self):
        return len(self.pieces)


@dataclass
class ExecutionSchedule:
    batch_id: int
    segment: int
    piece_sets: dict  # block id -> PieceSet, ascending block id (topological)
    edges: frozenset  # (block, block)
    footprints: dict  # block id -> frozenset of resource ids it serializes on
    txns: int = 0

    def nonempty(self) -> dict:
        return {b: ps for b, ps in self.piece_sets.items() if ps.pieces}

    def predecessors(self, block: int) -> list[int]:
        return sorted(a for a, b in self.edges if b == block)


class ScheduleBuilder:
    """Precomputes per-procedure piece templates for one global graph."""

    def __init__(self, gdg: GlobalDependencyGraph):
        self.gdg = gdg
        self.catch_all = len(gdg.blocks)
        self.all_resources = frozenset(range(self.catch_all + 1))
        self.templates: dict[str, tuple[tuple[int, tuple[CompiledOp, ...]], ...]] = {}
        for proc, pieces in gdg.pieces_by_proc.items():
            compiled = gdg.procedures[proc].compiled
            self.templates[proc] = tuple(
                (bid, tuple(compiled[i] for i in ops)) for bid, ops in pieces
            )
        self.table_blocks = gdg.table_blocks
        self.edges = frozenset(gdg.edges)
        self.footprints = {b: frozenset((b,)) for b in range(self.catch_all + 1)}

    def _fresh(self, batch_id: int, segment: int) -> ExecutionSchedule:
        return ExecutionSchedule(
            batch_id,
            segment,
            {b: PieceSet(b) for b in range(self.catch_all + 1)},
            self.edges,
            self.footprints,
        )

    def build(self, batch: LogBatch) -> list[ExecutionSchedule]:
        """Split ``batch`` into one or more schedules that must run in order."""
        out = []
        cur = self._fresh(batch.batch_id, 0)
        sets = cur.piece_sets
        templates = self.templates
        procedures = self.gdg.procedures
        for t, entry in enumerate(batch.entries):
            body = entry.body
            if not isinstance(body, AdHoc):
                tpl = templates.get(body.proc)
                if tpl is None:
                    if body.proc in procedures:
                        cur.txns += 1  # procedure with no operations
                        continue
                    raise UnrecoverableLogError(
                        f"log entry {entry.commit_seq} invokes unknown procedure {body.proc!r}"
                    )
                try:
                    env = procedures[body.proc].bind(body.args)
                except ValueError as exc:
                    raise UnrecoverableLogError(f"log entry {entry.commit_seq}: {exc}") from None
                cur.txns += 1
                for bid, ops in tpl:
                    sets[bid].pieces.append(Piece(t, bid, entry.commit_seq, body.proc, ops, env))
                continue
            groups: dict[int, list] = {}
            shared = False
            for item in body.write_set:
                owners = self.table_blocks.get(item[0])
                if not owners:
                    bid = self.catch_all
                elif len(owners) == 1:
                    (bid,) = owners
                else:
                    shared = True
                    break
                groups.setdefault(bid, []).append(item)
            if shared:
                if cur.txns:
                    out.append(cur)
                barrier = ExecutionSchedule(
                    batch.batch_id,
                    len(out),
                    {
                        self.catch_all: PieceSet(
                            self.catch_all,
                            [Piece(t, self.catch_all, entry.commit_seq, None, (), {}, body.write_set)],
                        )
                    },
                    frozenset(),
                    {self.catch_all: self.all_resources},
                    1,
                )
                out.append(barrier)
                cur = self._fresh(batch.batch_id, len(out))
                sets = cur.piece_sets
                continue
            cur.txns += 1
            for bid, items in groups.items():
                sets[bid].pieces.append(
                    Piece(t, bid, entry.commit_seq, None, (), {}, tuple(items))
                )
        if cur.txns or not out:
            out.append(cur)
        return out


def generate_schedules(batch: LogBatch, gdg: GlobalDependencyGraph) -> list[ExecutionSchedule]:
    return ScheduleBuilder(gdg).build(batch)


def generate_schedule(batch: LogBatch, gdg: GlobalDependencyGraph) -> ExecutionSchedule:
    """Schedule for a batch that needs no segmentation (the common case)."""
    schedules = generate_schedules(batch, gdg)
    if len(schedules) != 1:
        raise ValueError(
            f"batch {batch.batch_id} needs {len(schedules)} segments; use generate_schedules"
        )
    return schedules[0]


def iter_schedules(batches: Iterable[LogBatch], gdg: GlobalDependencyGraph):
    builder = ScheduleBuilder(gdg)
    for batch in batches:
        yield from builder.build(batch)
