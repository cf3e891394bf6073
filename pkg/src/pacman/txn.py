"""Transaction execution during normal processing.

Transactions run a procedure's ops in program order against a private write
buffer (reads see the transaction's own earlier writes) and install the
buffer at commit.  With more than one worker, isolation comes from strict
two-phase locking on individual tuples; deadlocks are avoided with
wait-die, so a younger transaction that would wait on an older one restarts
instead (keeping its original timestamp, so it eventually becomes the oldest
and cannot starve).  Before restarting, the victim releases everything and
waits until the older holder lets go of the contested row; retrying at once
would livelock under a fine-grained thread switch interval.

Commit sequence numbers come from one counter advanced under a commit
mutex while the committing transaction still holds all its locks, so the
order of ``commit_seq`` is a serialization order.
"""

from __future__ import annotations

import itertools
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .ir import INSERT, READ, WRITE, EvaluationError, ProcedureIR
from .storage import TOMBSTONE, Database, DuplicateKeyError, MissingKeyError

COMMITTED = "committed"
ABORTED = "aborted"

SHARED = "S"
EXCLUSIVE = "X"


@dataclass(frozen=True)
class TxnRequest:
    proc: str
    args: tuple
    adhoc: bool = False


@dataclass
class TxnResult:
    status: str
    commit_seq: int | None = None
    write_set: list = field(default_factory=list)  # [(table, key, value | TOMBSTONE)]
    outputs: dict = field(default_factory=dict)
    epoch: int | None = None
    error: str | None = None
    request: TxnRequest | None = None

    @property
    def committed(self) -> bool:
        return self.status == COMMITTED


class TxnAbort(Exception):
    """Logical abort; the message names the cause."""


class _Die(Exception):
    """Wait-die victim; the transaction restarts with its old timestamp."""

    def __init__(self, resource=None, blocker=None):
        super().__init__(resource, blocker)
        self.resource = resource
        self.blocker = blocker


# ---------------------------------------------------------------------------
# interpreter


def interpret(db: Database, ir: ProcedureIR, args, lock=None):
    """Run ``ir`` against a private buffer.

    Returns ``(write_set, buffer, env)``; ``buffer`` maps (table, key) to the
    final value (or TOMBSTONE).  Raises TxnAbort on any logical failure.
    ``lock(table, key, mode)`` is called before every access when given.
    """
    try:
        env = ir.bind(args)
    except ValueError as exc:
        raise TxnAbort(str(exc)) from None
    buffer: dict = {}
    write_set: list = []
    tables = db.tables
    try:
        for op in ir.compiled:
            if op.guard is not None and op.guard(env) != op.branch:
                continue
            key = op.key(env)
            if key is None:
                raise TxnAbort(f"null key in {op.kind} on {op.table}")
            table = op.table
            slot = (table, key)
            kind = op.kind
            if kind == READ:
                if lock is not None:
                    lock(table, key, SHARED)
                if slot in buffer:
                    value = buffer[slot]
                    env[op.out_var] = None if value is TOMBSTONE else value
                else:
                    env[op.out_var] = tables[table].get(key)
                continue
            if lock is not None:
                lock(table, key, EXCLUSIVE)
            if kind == WRITE:
                value = op.value(env)
                if value is None:
                    raise TxnAbort(f"write of null to {table}[{key!r}]")
            elif kind == INSERT:
                present = buffer[slot] is not TOMBSTONE if slot in buffer else key in tables[table]
                if present:
                    raise TxnAbort(str(DuplicateKeyError(f"{table}[{key!r}] already exists")))
                value = op.value(env)
                if value is None:
                    raise TxnAbort(f"insert of null into {table}[{key!r}]")
            else:
                present = buffer[slot] is not TOMBSTONE if slot in buffer else key in tables[table]
                if not present:
                    raise TxnAbort(str(MissingKeyError(f"{table}[{key!r}] does not exist")))
                value = TOMBSTONE
            buffer[slot] = value
            write_set.append((table, key, value))
    except EvaluationError as exc:
        raise TxnAbort(str(exc)) from None
    except KeyError as exc:
        raise TxnAbort(f"unknown table {exc.args[0]!r}") from None
    return write_set, buffer, env


def install(db: Database, buffer: Mapping) -> None:
    tables = db.tables
    for (table, key), value in buffer.items():
        if value is TOMBSTONE:
            tables[table].pop(key, None)
        else:
            tables[table][key] = value


def execute(db: Database, ir: ProcedureIR, args, commit_seq: int | None = None) -> TxnResult:
    """Run one transaction serially; commits atomically or leaves ``db`` untouched."""
    try:
        write_set, buffer, env = interpret(db, ir, args)
    except TxnAbort as exc:
        return TxnResult(ABORTED, error=str(exc))
    install(db, buffer)
    return TxnResult(COMMITTED, commit_seq, write_set, _outputs(ir, env))


def _outputs(ir: ProcedureIR, env: dict) -> dict:
    params = set(ir.params)
    return {k: v for k, v in env.items() if k not in params}


# ---------------------------------------------------------------------------
# locking


class _LockState:
    __slots__ = ("holders",)

    def __init__(self):
        self.holders: dict[int, str] = {}  # txn timestamp -> mode


class LockManager:
    """Per-tuple shared/exclusive locks with wait-die deadlock avoidance."""

    def __init__(self):
        self._cond = threading.Condition()
        self._locks: dict[tuple, _LockState] = {}
        self.acquisitions = 0

    def acquire(self, ts: int, resource: tuple, mode: str) -> bool:
        """Grant ``mode`` on ``resource`` to ``ts``; returns True if newly granted.

        Raises _Die when ``ts`` is younger than a conflicting holder.
        """
        with self._cond:
            while True:
                state = self._locks.get(resource)
                if state is None:
                    state = self._locks[resource] = _LockState()
                held = state.holders.get(ts)
                if held == EXCLUSIVE or held == mode:
                    return False
                conflicts = [
                    other
                    for other, m in state.holders.items()
                    if other != ts and (mode == EXCLUSIVE or m == EXCLUSIVE)
                ]
                if not conflicts:
                    state.holders[ts] = mode
                    self.acquisitions += 1
                    return held is None
                oldest = min(conflicts)
                if ts > oldest:
                    raise _Die(resource, oldest)
                self._cond.wait()

    def wait_released(self, resource: tuple, holder: int) -> None:
        """Block until ``holder`` no longer holds ``resource``.

        A wait-die victim calls this (holding no locks) before restarting, so
        it cannot spin re-taking shared locks the older transaction waits on.
        """
        with self._cond:
            while True:
                state = self._locks.get(resource)
                if state is None or holder not in state.holders:
                    return
                self._cond.wait()

    def release_all(self, ts: int, resources: Iterable[tuple]) -> None:
        with self._cond:
            for resource in resources:
                state = self._locks.get(resource)
                if state is None:
                    continue
                state.holders.pop(ts, None)
                if not state.holders:
                    del self._locks[resource]
            self._cond.notify_all()

    def held(self) -> int:
        with self._cond:
            return sum(len(s.holders) for s in self._locks.values())


# ---------------------------------------------------------------------------
# workload runtime


CommitHook = Callable[[TxnResult, TxnRequest], None]


class Runtime:
    """Executes request streams against ``db`` with a fixed worker count.

    ``on_commit(result, request)`` runs under the commit mutex, in commit
    order; ``epoch()`` supplies the epoch stamped on each committed result.
    """

    def __init__(
        self,
        db: Database,
        procs: Mapping[str, ProcedureIR],
        workers: int = 1,
        on_commit: CommitHook | None = None,
        epoch: Callable[[], int] = lambda: 0,
    ):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.db = db
        self.procs = dict(procs)
        self.workers = workers
        self.on_commit = on_commit
        self.epoch = epoch
        self.locks = LockManager()
        self._commit_mutex = threading.Lock()
        self._next_seq = 1
        self._ts = itertools.count(1)
        self.restarts = 0
        self._pool = ThreadPoolExecutor(workers, thread_name_prefix="txn") if workers > 1 else None

    @property
    def next_seq(self) -> int:
        return self._next_seq

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _commit(self, request: TxnRequest, ir: ProcedureIR, write_set, buffer, env) -> TxnResult:
        with self._commit_mutex:
            seq = self._next_seq
            self._next_seq += 1
            result = TxnResult(
                COMMITTED, seq, write_set, _outputs(ir, env), self.epoch(), request=request
            )
            install(self.db, buffer)
            if self.on_commit is not None:
                self.on_commit(result, request)
        return result

    def _lookup(self, request: TxnRequest) -> ProcedureIR:
        try:
            return self.procs[request.proc]
        except KeyError:
            raise TxnAbort(f"unknown procedure {request.proc!r}") from None

    def submit_serial(self, request: TxnRequest) -> TxnResult:
        try:
            ir = self._lookup(request)
            write_set, buffer, env = interpret(self.db, ir, request.args)
        except TxnAbort as exc:
            return TxnResult(ABORTED, error=str(exc), request=request)
        return self._commit(request, ir, write_set, buffer, env)

    def submit_locked(self, request: TxnRequest) -> TxnResult:
        ts = next(self._ts)
        while True:
            held: list = []

            def lock(table, key, mode):
                if self.locks.acquire(ts, (table, key), mode):
                    held.append((table, key))

            try:
                ir = self._lookup(request)
                write_set, buffer, env = interpret(self.db, ir, request.args, lock)
            except _Die as die:
                self.locks.release_all(ts, held)
                with self._commit_mutex:
                    self.restarts += 1
                self.locks.wait_released(die.resource, die.blocker)
                continue
            except TxnAbort as exc:
                self.locks.release_all(ts, held)
                return TxnResult(ABORTED, error=str(exc), request=request)
            try:
                return self._commit(request, ir, write_set, buffer, env)
            finally:
                self.locks.release_all(ts, held)

    def run(self, requests: Iterable[TxnRequest]) -> tuple[list[TxnResult], list[TxnResult]]:
        """Execute all requests; returns (committed in commit order, aborted)."""
        if self._pool is None:
            results = [self.submit_serial(r) for r in requests]
        else:
            source = iter(requests)
            source_lock = threading.Lock()
            results = []

            def worker():
                local = []
                while True:
                    with source_lock:
                        request = next(source, None)
                    if request is None:
                        return local
                    local.append(self.submit_locked(request))

            futures = [self._pool.submit(worker) for _ in range(self.workers)]
            for f in futures:
                results.extend(f.result())
        committed = sorted((r for r in results if r.committed), key=lambda r: r.commit_seq)
        aborted = [r for r in results if not r.committed]
        return committed, aborted


def run_workload(
    db: Database,
    procs: Mapping[str, ProcedureIR] | Sequence[ProcedureIR],
    requests: Iterable[TxnRequest],
    worker_count: int = 1,
    on_commit: CommitHook | None = None,
) -> tuple[list[TxnResult], list[TxnResult]]:
    """One-shot convenience wrapper around :class:`Runtime`."""
    if not isinstance(procs, Mapping):
        procs = {p.name: p for p in procs}
    with Runtime(db, procs, worker_count, on_commit) as rt:
        return rt.run(requests)
