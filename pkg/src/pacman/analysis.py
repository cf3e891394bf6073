"""Compile-time decomposition of stored procedures.

``build_local_graph`` splits one procedure into the finest set of slices
such that

* operations that may conflict (same table, one of them modifies) share a
  slice,
* a slice containing ``x`` and a flow-dependent ``y`` also contains every
  operation between them, and
* the slice graph induced by flow dependencies is acyclic.

``build_global_graph`` then groups the slices of all procedures into
blocks: conflicting slices share a block, mutually reachable blocks are
merged, and slices of one procedure that land in the same block are fused.
Both constructions are union-find closures iterated to a fixpoint, so the
result does not depend on the order candidate pairs are visited in.
"""

from __future__ import annotations

import heapq
import json
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

from .ir import DepEdge, ProcedureIR, extract_data_deps, extract_flow_deps


class _UnionFind:
    def __init__(self, items: Iterable):
        self.parent = {x: x for x in items}

    def find(self, x):
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        # smaller representative wins so roots stay canonical
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return True

    def groups(self) -> dict:
        out = defaultdict(list)
        for x in self.parent:
            out[self.find(x)].append(x)
        return out


def strongly_connected(nodes: Iterable, edges: Iterable[tuple]) -> list[list]:
    """Tarjan's SCC algorithm (iterative).  Returns components in no particular order."""
    adj = defaultdict(list)
    for a, b in edges:
        adj[a].append(b)
    index, low, on_stack = {}, {}, set()
    stack, result, counter = [], [], 0
    for root in nodes:
        if root in index:
            continue
        work = [(root, iter(adj[root]))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, children = work[-1]
            advanced = False
            for child in children:
                if child not in index:
                    index[child] = low[child] = counter
                    counter += 1
                    stack.append(child)
                    on_stack.add(child)
                    work.append((child, iter(adj[child])))
                    advanced = True
                    break
                if child in on_stack:
                    low[node] = min(low[node], index[child])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == node:
                        break
                result.append(comp)
    return result


# ---------------------------------------------------------------------------
# local dependency graph


@dataclass(frozen=True)
class Slice:
    proc: str
    ordinal: int
    ops: tuple[int, ...]
    parts: tuple[int, ...] = ()  # local slice ordinals fused into this one (global graph)

    @property
    def id(self) -> tuple[str, int]:
        return (self.proc, self.ordinal)

    @property
    def name(self) -> str:
        if len(self.parts) > 1:
            return f"{self.proc}.{'+'.join(map(str, self.parts))}"
        return f"{self.proc}.{self.ordinal}"


@dataclass(frozen=True)
class LocalDependencyGraph:
    proc: str
    slices: tuple[Slice, ...]
    edges: frozenset[tuple[int, int]]
    ir: ProcedureIR = field(compare=False, repr=False)

    def slice_of(self, op_index: int) -> int:
        for s in self.slices:
            if op_index in s.ops:
                return s.ordinal
        raise KeyError(op_index)


def build_local_graph(
    ir: ProcedureIR,
    flow: Iterable[DepEdge] | None = None,
    data: Iterable[DepEdge] | None = None,
) -> LocalDependencyGraph:
    """Decompose ``ir`` into its finest valid slicing."""
    flow_pairs = sorted({(e.from_op, e.to_op) for e in (flow if flow is not None else extract_flow_deps(ir))})
    data_pairs = sorted({(e.from_op, e.to_op) for e in (data if data is not None else extract_data_deps(ir))})
    n = len(ir.ops)
    uf = _UnionFind(range(n))

    changed = True
    while changed:
        changed = False
        for a, b in data_pairs:
            changed |= uf.union(a, b)
        slice_edges = {(uf.find(a), uf.find(b)) for a, b in flow_pairs if uf.find(a) != uf.find(b)}
        roots = sorted({uf.find(i) for i in range(n)})
        for comp in strongly_connected(roots, slice_edges):
            for other in comp[1:]:
                changed |= uf.union(comp[0], other)
        for a, b in flow_pairs:
            if uf.find(a) == uf.find(b):
                for between in range(a + 1, b):
                    changed |= uf.union(a, between)

    groups = sorted((sorted(members) for members in uf.groups().values()), key=lambda g: g[0])
    ordinal_of = {}
    slices = []
    for ordinal, members in enumerate(groups):
        slices.append(Slice(ir.name, ordinal, tuple(members), (ordinal,)))
        for op in members:
            ordinal_of[op] = ordinal
    edges = frozenset(
        (ordinal_of[a], ordinal_of[b]) for a, b in flow_pairs if ordinal_of[a] != ordinal_of[b]
    )
    return LocalDependencyGraph(ir.name, tuple(slices), edges, ir)


# ---------------------------------------------------------------------------
# global dependency graph


@dataclass(frozen=True)
class Block:
    id: int
    slices: tuple[Slice, ...]

    @property
    def procs(self) -> tuple[str, ...]:
        return tuple(s.proc for s in self.slices)


@dataclass(frozen=True)
class GlobalDependencyGraph:
    blocks: tuple[Block, ...]
    edges: frozenset[tuple[int, int]]
    procedures: dict = field(compare=False, repr=False)  # name -> ProcedureIR

    @cached_property
    def slice_catalog(self) -> dict[tuple[str, int], tuple[int, ...]]:
        """(procedure, block id) -> op indexes of that procedure's slice in the block."""
        return {(s.proc, b.id): s.ops for b in self.blocks for s in b.slices}

    @cached_property
    def pieces_by_proc(self) -> dict[str, tuple[tuple[int, tuple[int, ...]], ...]]:
        """Procedure -> ((block id, op indexes), ...) in block order."""
        out = defaultdict(list)
        for b in self.blocks:
            for s in b.slices:
                out[s.proc].append((b.id, s.ops))
        return {proc: tuple(v) for proc, v in out.items()}

    @cached_property
    def block_of_op(self) -> dict[tuple[str, int], int]:
        return {(s.proc, op): b.id for b in self.blocks for s in b.slices for op in s.ops}

    @cached_property
    def predecessors(self) -> dict[int, tuple[int, ...]]:
        preds = defaultdict(list)
        for a, b in sorted(self.edges):
            preds[b].append(a)
        return {b.id: tuple(preds[b.id]) for b in self.blocks}

    @cached_property
    def successors(self) -> dict[int, tuple[int, ...]]:
        succ = defaultdict(list)
        for a, b in sorted(self.edges):
            succ[a].append(b)
        return {b.id: tuple(succ[b.id]) for b in self.blocks}

    @cached_property
    def table_blocks(self) -> dict[str, frozenset[int]]:
        """Table -> ids of blocks holding an operation on it."""
        out = defaultdict(set)
        for b in self.blocks:
            for s in b.slices:
                ir = self.procedures[s.proc]
                for op in s.ops:
                    out[ir.ops[op].table].add(b.id)
        return {t: frozenset(v) for t, v in out.items()}

    def topological_order(self) -> list[int]:
        indeg = {b.id: len(self.predecessors[b.id]) for b in self.blocks}
        ready = [bid for bid, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            bid = heapq.heappop(ready)
            order.append(bid)
            for nxt in self.successors[bid]:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    heapq.heappush(ready, nxt)
        if len(order) != len(self.blocks):
            raise ValueError("global dependency graph has a cycle")
        return order


def build_global_graph(ldgs: Sequence[LocalDependencyGraph]) -> GlobalDependencyGraph:
    """Integrate per-procedure slice graphs into one block graph."""
    names = [g.proc for g in ldgs]
    if len(set(names)) != len(names):
        raise ValueError(f"one local graph per procedure expected, got {names}")
    proc_rank = {g.proc: i for i, g in enumerate(ldgs)}

    # slice keys sort by (procedure input position, local ordinal)
    slice_ops = {}
    for g in ldgs:
        for s in g.slices:
            slice_ops[(proc_rank[g.proc], s.ordinal)] = (g.ir, s.ops)
    keys = sorted(slice_ops)

    footprint = {}
    for key, (ir, ops) in slice_ops.items():
        reads, writes = set(), set()
        for i in ops:
            (writes if ir.ops[i].modifies else reads).add(ir.ops[i].table)
        footprint[key] = (reads, writes)

    def data_dependent(a, b):
        ra, wa = footprint[a]
        rb, wb = footprint[b]
        return bool(wa & (rb | wb)) or bool(wb & ra)

    slice_edges = [
        ((proc_rank[g.proc], a), (proc_rank[g.proc], b)) for g in ldgs for a, b in sorted(g.edges)
    ]

    uf = _UnionFind(keys)
    changed = True
    while changed:
        changed = False
        for i, a in enumerate(keys):
            for b in keys[i + 1:]:
                if a[0] != b[0] and uf.find(a) != uf.find(b) and data_dependent(a, b):
                    changed |= uf.union(a, b)
        block_edges = {(uf.find(a), uf.find(b)) for a, b in slice_edges if uf.find(a) != uf.find(b)}
        roots = sorted({uf.find(k) for k in keys})
        for comp in strongly_connected(roots, block_edges):
            for other in comp[1:]:
                changed |= uf.union(comp[0], other)

    groups = [sorted(members) for members in uf.groups().values()]
    root_of = {k: uf.find(k) for k in keys}
    edges_by_root = {(root_of[a], root_of[b]) for a, b in slice_edges if root_of[a] != root_of[b]}

    # number blocks in topological order, ties broken by smallest slice key
    first = {uf.find(g[0]): g[0] for g in groups}
    indeg = defaultdict(int)
    succ = defaultdict(set)
    for a, b in edges_by_root:
        succ[a].add(b)
        indeg[b] += 1
    ready = [(first[r], r) for r in first if indeg[r] == 0]
    heapq.heapify(ready)
    block_id = {}
    while ready:
        _, r = heapq.heappop(ready)
        block_id[r] = len(block_id)
        for nxt in succ[r]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, (first[nxt], nxt))
    assert len(block_id) == len(groups), "cycle survived merging"

    members_of = defaultdict(list)
    for k in keys:
        members_of[root_of[k]].append(k)
    blocks = [None] * len(groups)
    for root, bid in block_id.items():
        by_proc = defaultdict(list)
        for rank, ordinal in members_of[root]:
            by_proc[rank].append(ordinal)
        fused = []
        for rank in sorted(by_proc):
            g = ldgs[rank]
            parts = tuple(sorted(by_proc[rank]))
            ops = tuple(sorted(op for o in parts for op in g.slices[o].ops))
            fused.append(Slice(g.proc, parts[0], ops, parts))
        blocks[bid] = Block(bid, tuple(fused))
    edges = frozenset((block_id[a], block_id[b]) for a, b in edges_by_root)
    return GlobalDependencyGraph(tuple(blocks), edges, {g.proc: g.ir for g in ldgs})


def analyze(procs: Sequence[ProcedureIR]) -> tuple[list[LocalDependencyGraph], GlobalDependencyGraph]:
    ldgs = [build_local_graph(p) for p in procs]
    return ldgs, build_global_graph(ldgs)


# ---------------------------------------------------------------------------
# rendering


def _q(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _slice_label(ir: ProcedureIR | None, s: Slice) -> str:
    lines = [s.name]
    if ir is not None:
        lines.extend(str(ir.ops[i]) for i in s.ops)
    else:
        lines.append("ops " + ",".join(map(str, s.ops)))
    return "\\l".join(line.replace("\\", "\\\\").replace('"', '\\"') for line in lines) + "\\l"


def export_dot(graph: LocalDependencyGraph | GlobalDependencyGraph | None, name: str = "G") -> str:
    """Deterministic Graphviz rendering; global graphs draw one dashed cluster per block."""
    out = [f"digraph {_q(name)} {{", "  node [shape=box, fontname=monospace];"]
    if isinstance(graph, LocalDependencyGraph):
        for s in graph.slices:
            out.append(f"  {_q(s.name)} [label=\"{_slice_label(graph.ir, s)}\"];")
        for a, b in sorted(graph.edges):
            out.append(f"  {_q(graph.slices[a].name)} -> {_q(graph.slices[b].name)};")
    elif isinstance(graph, GlobalDependencyGraph):
        out.insert(1, "  compound=true;")
        for b in graph.blocks:
            out.append(f"  subgraph cluster_B{b.id} {{")
            out.append(f"    label={_q(f'B{b.id}')}; style=dashed;")
            for s in b.slices:
                ir = graph.procedures.get(s.proc)
                out.append(f"    {_q(s.name)} [label=\"{_slice_label(ir, s)}\"];")
            out.append("  }")
        for a, b in sorted(graph.edges):
            src, dst = graph.blocks[a].slices[0].name, graph.blocks[b].slices[0].name
            out.append(f"  {_q(src)} -> {_q(dst)} [ltail=cluster_B{a}, lhead=cluster_B{b}];")
    out.append("}")
    return "\n".join(out) + "\n"


def graph_to_json(gdg: GlobalDependencyGraph) -> dict:
    """Schema ``pacman-gdg/1``: see docs/file-formats.md."""
    return {
        "format": "pacman-gdg",
        "version": 1,
        "procedures": sorted(gdg.procedures),
        "blocks": [
            {
                "id": b.id,
                "slices": [
                    {"proc": s.proc, "ordinal": s.ordinal, "parts": list(s.parts), "ops": list(s.ops)}
                    for s in b.slices
                ],
            }
            for b in gdg.blocks
        ],
        "edges": [list(e) for e in sorted(gdg.edges)],
    }


def dumps_graph(gdg: GlobalDependencyGraph) -> str:
    return json.dumps(graph_to_json(gdg), indent=2, sort_keys=True) + "\n"
