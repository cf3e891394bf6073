"""Fine-grained dispatch of one piece-set onto several lanes.

Each (procedure, block) slice is cut statically into units: groups of ops
connected by flow dependencies inside the slice.  At replay time the keys
of every unit are evaluated from the transaction's arguments and the
outputs already delivered by upstream pieces.  Units that touch a common
row that any of them writes are glued into one component, and each
component runs on the lane chosen by hashing its first key.  Consequently
two ops on different lanes never touch the same row unless both only read
it, and no flow dependency crosses lanes.  Within a lane, work runs in
(commit order, program order).

A key that depends on a value read inside the same piece is not known
before the piece runs; such piece-sets are replayed serially instead.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

from ..analysis import GlobalDependencyGraph, _UnionFind
from ..ir import READ, EvaluationError, extract_flow_deps
from ..storage import encode_scalar


@dataclass(frozen=True)
class UnitTemplate:
    ops: tuple  # (CompiledOp, guard_known_at_dispatch) in program order


@dataclass(frozen=True)
class SliceTemplate:
    dispatchable: bool
    units: tuple[UnitTemplate, ...]


@dataclass
class DispatchUnit:
    piece: object
    items: list  # (CompiledOp, key) or ad-hoc (table, key, value) rows
    slots: tuple  # (table, key) per item
    writes: frozenset  # slots this unit modifies
    lane: int = 0

    @property
    def dispatch_key(self):
        return self.slots[0]


def build_templates(gdg: GlobalDependencyGraph) -> dict[tuple[str, int], SliceTemplate]:
    out = {}
    for (proc, bid), op_indexes in gdg.slice_catalog.items():
        ir = gdg.procedures[proc]
        members = set(op_indexes)
        defined_here = {ir.ops[i].out_var for i in op_indexes if ir.ops[i].kind == READ}
        uf = _UnionFind(op_indexes)
        for edge in extract_flow_deps(ir):
            if edge.from_op in members and edge.to_op in members:
                uf.union(edge.from_op, edge.to_op)
        dispatchable = all(not (ir.ops[i].key.variables() & defined_here) for i in op_indexes)
        units = []
        for group in sorted(uf.groups().values(), key=min):
            units.append(
                UnitTemplate(
                    tuple(
                        (ir.compiled[i], not (ir.guard_variables(ir.ops[i]) & defined_here))
                        for i in sorted(group)
                    )
                )
            )
        out[(proc, bid)] = SliceTemplate(dispatchable, tuple(units))
    return out


@lru_cache(maxsize=1 << 16)
def slot_hash(table: str, key) -> int:
    """Stable 64-bit hash of a (table, key) pair."""
    raw = table.encode("utf-8") + b"\0" + encode_scalar(key)
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")


def _units_of(pieces, templates) -> list[DispatchUnit] | None:
    units = []
    for piece in pieces:
        if piece.writes:
            for row in piece.writes:
                slot = (row[0], row[1])
                units.append(DispatchUnit(piece, [row], (slot,), frozenset((slot,))))
            continue
        tpl = templates[(piece.proc, piece.block)]
        if not tpl.dispatchable:
            return None
        env = piece.env
        for unit in tpl.units:
            items, slots, writes = [], [], set()
            for op, guard_known in unit.ops:
                if guard_known and op.guard is not None and op.guard(env) != op.branch:
                    continue
                key = op.key(env)
                slot = (op.table, key)
                items.append((op, key))
                slots.append(slot)
                if op.kind != READ:
                    writes.add(slot)
            if items:
                units.append(DispatchUnit(piece, items, tuple(slots), frozenset(writes)))
    return units


def plan_units(pieces, lanes: int, templates) -> list[DispatchUnit] | None:
    """Units of a piece-set with lanes assigned, or None to fall back to serial replay."""
    try:
        units = _units_of(pieces, templates)
    except (EvaluationError, KeyError, TypeError):
        return None
    if units is None:
        return None
    touching: dict = {}
    written = set()
    for i, u in enumerate(units):
        for slot in u.slots:
            touching.setdefault(slot, []).append(i)
        written |= u.writes
    uf = _UnionFind(range(len(units)))
    for slot in written:
        ids = touching[slot]
        for other in ids[1:]:
            uf.union(ids[0], other)
    lane_of_root = {}
    for i, u in enumerate(units):
        root = uf.find(i)
        lane = lane_of_root.get(root)
        if lane is None:
            # the root is the component's smallest unit id, so this is its first key
            table, key = units[root].slots[0]
            lane = lane_of_root[root] = slot_hash(table, key) % lanes
        u.lane = lane
    return units


def dispatch_fine(pieces, lanes: int, templates) -> list[list] | None:
    """Per-lane task lists ``[(piece, items), ...]``, or None when keys are not known yet."""
    units = plan_units(pieces, lanes, templates)
    if units is None:
        return None
    plan: list[list] = [[] for _ in range(lanes)]
    for u in units:
        tasks = plan[u.lane]
        if tasks and tasks[-1][0] is u.piece:
            tasks[-1][1].extend(u.items)
            if not u.piece.writes:
                tasks[-1][1].sort(key=lambda item: item[0].index)
        else:
            tasks.append((u.piece, list(u.items)))
    return plan
