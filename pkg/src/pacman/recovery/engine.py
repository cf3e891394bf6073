"""Parallel command-log replay.

Piece-sets are the unit of coordination.  A piece-set becomes ready when

* every piece-set of the same schedule it depends on (a global graph edge)
  has completed, and
* the newest earlier piece-set that serializes on one of the same resources
  (normally: the same block in the previous schedule) has completed.

Synchronous mode additionally waits for the whole previous batch, which is
a barrier between batches.  Pipelined mode admits up to ``window`` batches
at once.

Each block owns a contiguous range of workers.  A ready piece-set is handed
to the first worker of its block, which replays it serially or, when the
block has several workers and fine-grained dispatch is on, splits it into
lanes and hands one lane to each of the block's workers.
"""

from __future__ import annotations

import itertools
import queue
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from ..analysis import GlobalDependencyGraph
from ..durability import AdHoc, LogBatch
from ..storage import Database
from .dispatch import build_templates, dispatch_fine
from .kernels import apply_writes, run_keyed, run_piece_set
from .schedule import ExecutionSchedule, ScheduleBuilder

SYNCHRONOUS = "synchronous"
PIPELINED = "pipelined"
DEFAULT_WINDOW = 4


# ---------------------------------------------------------------------------
# core assignment


@dataclass(frozen=True)
class CoreAssignment:
    workers: dict  # block id -> worker count
    pool: int
    multiplexed: bool = False

    def worker_ids(self, catch_all: int | None = None) -> dict[int, tuple[int, ...]]:
        """Block -> the worker ids it owns; blocks get contiguous ranges in id order."""
        out = {}
        if self.multiplexed:
            for b in self.workers:
                out[b] = (b % self.pool,)
        else:
            nxt = 0
            for b in sorted(self.workers):
                out[b] = tuple(range(nxt, nxt + self.workers[b]))
                nxt += self.workers[b]
        if catch_all is not None:
            out[catch_all] = ((catch_all % self.pool),)
        return out


def assign_workers(counts: Mapping[int, int] | Sequence[int], pool: int) -> CoreAssignment:
    """Split ``pool`` workers across blocks in proportion to ``counts``.

    Largest-remainder rounding, then every block is raised to at least one
    worker, taking from the largest allocations.  With fewer workers than
    blocks, each block gets one time-shared worker.
    """
    if not isinstance(counts, Mapping):
        counts = dict(enumerate(counts))
    blocks = sorted(counts)
    if pool < 1:
        raise ValueError("pool must be >= 1")
    if not blocks:
        return CoreAssignment({}, pool)
    if pool < len(blocks):
        return CoreAssignment({b: 1 for b in blocks}, pool, multiplexed=True)
    total = sum(counts[b] for b in blocks)
    if total == 0:
        weights = {b: 1 for b in blocks}
        total = len(blocks)
    else:
        weights = {b: counts[b] for b in blocks}
    quota = {b: pool * weights[b] / total for b in blocks}
    alloc = {b: int(quota[b]) for b in blocks}
    left = pool - sum(alloc.values())
    by_remainder = sorted(blocks, key=lambda b: (-(quota[b] - alloc[b]), b))
    for b in by_remainder[:left]:
        alloc[b] += 1
    for b in blocks:
        if alloc[b] == 0:
            donor = max(blocks, key=lambda d: (alloc[d], -d))
            alloc[donor] -= 1
            alloc[b] = 1
    return CoreAssignment(alloc, pool)


def count_pieces(batches: Iterable[LogBatch], gdg: GlobalDependencyGraph) -> dict[int, int]:
    counts = {b.id: 0 for b in gdg.blocks}
    pieces = gdg.pieces_by_proc
    owners = gdg.table_blocks
    for batch in batches:
        for entry in batch.entries:
            body = entry.body
            if isinstance(body, AdHoc):
                for b in {bid for row in body.write_set for bid in owners.get(row[0], ())}:
                    counts[b] += 1
            else:
                for bid, _ in pieces.get(body.proc, ()):
                    counts[bid] += 1
    return counts


def estimate_assignment(
    batches: Iterable[LogBatch], gdg: GlobalDependencyGraph, pool_size: int
) -> CoreAssignment:
    """Core assignment from piece counts of a prefix of the reloaded batches."""
    return assign_workers(count_pieces(batches, gdg), pool_size)


# ---------------------------------------------------------------------------
# worker pool


class WorkerPool:
    """Fixed threads, each draining its own FIFO queue."""

    def __init__(self, size: int, on_error: Callable[[BaseException], None]):
        self.queues = [queue.SimpleQueue() for _ in range(size)]
        self.on_error = on_error
        self.threads = [
            threading.Thread(target=self._loop, args=(q,), name=f"replay-{i}", daemon=True)
            for i, q in enumerate(self.queues)
        ]
        for t in self.threads:
            t.start()

    def _loop(self, q):
        while True:
            task = q.get()
            if task is None:
                return
            try:
                task()
            except BaseException as exc:  # reported to the coordinator
                self.on_error(exc)

    def submit(self, worker: int, task: Callable[[], None]) -> None:
        self.queues[worker].put(task)

    def shutdown(self) -> None:
        for q in self.queues:
            q.put(None)
        for t in self.threads:
            t.join()


class _Node:
    __slots__ = (
        "batch_id", "segment", "block", "pieces", "workers", "pending",
        "gdg_succ", "res_succ", "done", "token", "lanes_left",
    )

    def __init__(self, batch_id, segment, block, pieces, workers, token):
        self.batch_id = batch_id
        self.segment = segment
        self.block = block
        self.pieces = pieces
        self.workers = workers
        self.pending = 0
        self.gdg_succ = []
        self.res_succ = []
        self.done = False
        self.token = token
        self.lanes_left = 0


class _Token:
    __slots__ = ("remaining",)

    def __init__(self):
        self.remaining = 0


@dataclass
class ReplayStats:
    batches: int = 0
    schedules: int = 0
    txns: int = 0
    piece_sets: int = 0
    pieces: int = 0
    notifications: int = 0
    gdg_edges_scheduled: int = 0
    fine_piece_sets: int = 0
    fallback_piece_sets: int = 0
    analysis_ms: float = 0.0
    replay_ms: float = 0.0


class ReplayEngine:
    """Replays batches into a database with a fixed worker pool."""

    def __init__(
        self,
        gdg: GlobalDependencyGraph,
        workers: int = 1,
        mode: str = PIPELINED,
        fine: bool = True,
        window: int = DEFAULT_WINDOW,
        assignment: CoreAssignment | None = None,
        on_start: Callable[[int, int, int], None] | None = None,
    ):
        if mode not in (SYNCHRONOUS, PIPELINED):
            raise ValueError(f"unknown mode {mode!r}")
        if workers < 1 or window < 1:
            raise ValueError("workers and window must be >= 1")
        self.gdg = gdg
        self.workers = workers
        self.mode = mode
        self.fine = fine
        self.window = 1 if mode == SYNCHRONOUS else window
        self.assignment = assignment
        self.on_start = on_start
        self.builder = ScheduleBuilder(gdg)
        self.templates = build_templates(gdg) if fine else {}
        self.stats = ReplayStats()

    # -- public entry points

    def run(self, db: Database, batches: Iterable[LogBatch]) -> ReplayStats:
        builder = self.builder

        def schedules():
            for batch in batches:
                t0 = time.perf_counter()
                out = builder.build(batch)
                self.stats.analysis_ms += (time.perf_counter() - t0) * 1000
                self.stats.batches += 1
                yield out

        if self.assignment is None:
            it = iter(batches)
            first = next(it, None)
            head = [first] if first is not None else []
            self.assignment = estimate_assignment(head, self.gdg, self.workers)
            batches = itertools.chain(head, it)
        return self._execute(db, schedules())

    def run_schedules(self, db: Database, groups: Iterable[Sequence[ExecutionSchedule]]) -> ReplayStats:
        """Replay pre-built schedules; each group is one batch's segment list."""
        if self.assignment is None:
            self.assignment = assign_workers({b.id: 1 for b in self.gdg.blocks}, self.workers)
        return self._execute(db, groups)

    # -- internals

    def _execute(self, db: Database, groups) -> ReplayStats:
        stats = self.stats
        tables = db.tables
        catch_all = self.builder.catch_all
        worker_ids = self.assignment.worker_ids(catch_all)
        pool_size = max(max(ids) for ids in worker_ids.values()) + 1
        cond = threading.Condition()
        state = {"inflight": 0, "error": None}
        fine = self.fine
        templates = self.templates
        on_start = self.on_start
        last: dict[int, _Node] = {}

        def fail(exc):
            with cond:
                if state["error"] is None:
                    state["error"] = exc
                cond.notify_all()

        pool = WorkerPool(pool_size, fail)

        def submit(node):
            pool.submit(node.workers[0], lambda: start(node))

        def complete(node):
            ready = []
            with cond:
                node.done = True
                for s in node.gdg_succ:
                    stats.notifications += 1
                    s.pending -= 1
                    if s.pending == 0:
                        ready.append(s)
                for s in node.res_succ:
                    s.pending -= 1
                    if s.pending == 0:
                        ready.append(s)
                token = node.token
                token.remaining -= 1
                if token.remaining == 0:
                    state["inflight"] -= 1
                    cond.notify_all()
            for s in ready:
                submit(s)

        def run_lane(node, tasks):
            if state["error"] is None:
                for piece, items in tasks:
                    if piece.writes:
                        apply_writes(tables, items)
                    else:
                        run_keyed(tables, items, piece.env, f"txn {piece.commit_seq} block {piece.block}")
            with cond:
                node.lanes_left -= 1
                finished = node.lanes_left == 0
            if finished:
                complete(node)

        def start(node):
            if state["error"] is not None:
                return
            if on_start is not None:
                on_start(node.batch_id, node.segment, node.block)
            pieces = node.pieces
            lanes = len(node.workers)
            if pieces and fine and lanes > 1:
                plan = dispatch_fine(pieces, lanes, templates)
                if plan is not None:
                    work = [(w, tasks) for w, tasks in zip(node.workers, plan) if tasks]
                    with cond:
                        stats.fine_piece_sets += 1
                        node.lanes_left = len(work)
                    if not work:  # every op skipped by a guard known at dispatch
                        complete(node)
                    for w, tasks in work:
                        pool.submit(w, lambda tasks=tasks: run_lane(node, tasks))
                    return
                with cond:
                    stats.fallback_piece_sets += 1
            if pieces:
                run_piece_set(tables, pieces)
            complete(node)

        t0 = time.perf_counter()
        analysis_before = stats.analysis_ms
        try:
            self._feed(groups, cond, state, stats, worker_ids, last, submit)
        except BaseException:
            pool.shutdown()
            db.clear()
            raise
        pool.shutdown()
        stats.replay_ms += (time.perf_counter() - t0) * 1000 - (stats.analysis_ms - analysis_before)
        if state["error"] is not None:
            db.clear()
            raise state["error"]
        return stats

    def _feed(self, groups, cond, state, stats, worker_ids, last, submit) -> None:
        """Turn schedules into dependency-counted nodes and release the ready ones."""
        for group in groups:
            with cond:
                while state["inflight"] >= self.window and state["error"] is None:
                    cond.wait()
                if state["error"] is not None:
                    break
                token = _Token()
                nodes_all = []
                for sched in group:
                    stats.schedules += 1
                    stats.txns += sched.txns
                    nodes = {}
                    for bid, ps in sched.piece_sets.items():
                        node = _Node(sched.batch_id, sched.segment, bid, ps.pieces, worker_ids[bid], token)
                        nodes[bid] = node
                        stats.piece_sets += 1
                        stats.pieces += len(ps.pieces)
                    for a, b in sched.edges:
                        if a in nodes and b in nodes:
                            nodes[a].gdg_succ.append(nodes[b])
                            nodes[b].pending += 1
                            stats.gdg_edges_scheduled += 1
                    for bid, node in nodes.items():
                        for r in sched.footprints[bid]:
                            prev = last.get(r)
                            if prev is not None and not prev.done and not any(
                                s is node for s in prev.res_succ
                            ):
                                prev.res_succ.append(node)
                                node.pending += 1
                            last[r] = node
                    nodes_all.extend(nodes.values())
                token.remaining = len(nodes_all)
                if not nodes_all:
                    continue
                state["inflight"] += 1
                ready = [n for n in nodes_all if n.pending == 0]
            for n in ready:
                submit(n)
        with cond:
            while state["inflight"] > 0 and state["error"] is None:
                cond.wait()


def execute_coarse(
    schedule: ExecutionSchedule | Sequence[ExecutionSchedule],
    db: Database,
    assignment: CoreAssignment,
    gdg: GlobalDependencyGraph,
) -> ReplayStats:
    """Replay one batch's schedule(s) with one thread per piece-set."""
    group = [schedule] if isinstance(schedule, ExecutionSchedule) else list(schedule)
    engine = ReplayEngine(gdg, assignment.pool, SYNCHRONOUS, fine=False, assignment=assignment)
    return engine.run_schedules(db, [group])
