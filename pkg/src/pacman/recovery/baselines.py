"""Reference recovery schemes.

``recover_serial`` (CLR) re-executes every logged transaction on one thread
in commit order; it is the correctness oracle for everything else.
``recover_llr_p`` (LLR-P) replays logical write sets, sharding rows across
workers by a hash of (table, key) so each row's writes stay in commit order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, Mapping

from ..durability import AdHoc, LogBatch
from ..errors import LogModeError, UnrecoverableLogError
from ..ir import ProcedureIR
from ..storage import Database
from .dispatch import slot_hash
from .kernels import apply_writes, run_ops


def replay_serial(db: Database, batches: Iterable[LogBatch], procs: Mapping[str, ProcedureIR]) -> tuple[int, int]:
    """Returns (batches, transactions) replayed."""
    try:
        return _replay_serial(db.tables, batches, procs)
    except BaseException:
        db.clear()
        raise


def _replay_serial(tables, batches, procs):
    nbatches = ntxns = 0
    for batch in batches:
        nbatches += 1
        for entry in batch.entries:
            ntxns += 1
            body = entry.body
            if isinstance(body, AdHoc):
                apply_writes(tables, body.write_set)
                continue
            ir = procs.get(body.proc)
            if ir is None:
                raise UnrecoverableLogError(
                    f"log entry {entry.commit_seq} invokes unknown procedure {body.proc!r}"
                )
            try:
                env = ir.bind(body.args)
            except ValueError as exc:
                raise UnrecoverableLogError(f"log entry {entry.commit_seq}: {exc}") from None
            run_ops(tables, ir.compiled, env, f"txn {entry.commit_seq}")
    return nbatches, ntxns


def _lanes_for(batch: LogBatch, workers: int, last_writer_wins: bool) -> list:
    lanes: list = [{} if last_writer_wins else [] for _ in range(workers)]
    for entry in batch.entries:
        body = entry.body
        if not isinstance(body, AdHoc):
            raise LogModeError(
                f"log entry {entry.commit_seq} is a command entry; llr-p replays logical "
                "write sets only (record the run with --log-mode logical or use clr/clr-p)"
            )
        for table, key, value in body.write_set:
            lane = lanes[slot_hash(table, key) % workers]
            if last_writer_wins:
                lane[(table, key)] = value
            else:
                lane.append((table, key, value))
    if last_writer_wins:
        return [[(t, k, v) for (t, k), v in lane.items()] for lane in lanes]
    return lanes


def replay_logical(
    db: Database, batches: Iterable[LogBatch], workers: int = 1, last_writer_wins: bool = False
) -> tuple[int, int]:
    tables = db.tables
    nbatches = ntxns = 0
    pool = ThreadPoolExecutor(workers, thread_name_prefix="llr") if workers > 1 else None
    try:
        for batch in batches:
            nbatches += 1
            ntxns += len(batch.entries)
            lanes = _lanes_for(batch, workers, last_writer_wins)
            if pool is None:
                apply_writes(tables, lanes[0])
            else:
                for f in [pool.submit(apply_writes, tables, lane) for lane in lanes if lane]:
                    f.result()
    except BaseException:
        db.clear()
        raise
    finally:
        if pool is not None:
            pool.shutdown()
    return nbatches, ntxns
