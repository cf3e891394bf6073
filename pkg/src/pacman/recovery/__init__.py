"""Log replay: the parallel engine, its baselines and a directory-level driver."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from ..analysis import GlobalDependencyGraph, analyze
from ..durability import LogBatch, Manifest, load_batches, load_checkpoint, read_pepoch, reload_ahead
from ..ir import ProcedureIR, load_procedures
from ..storage import Database, hex_digest
from .baselines import replay_logical, replay_serial
from .dispatch import dispatch_fine
from .engine import (
    PIPELINED,
    SYNCHRONOUS,
    CoreAssignment,
    ReplayEngine,
    assign_workers,
    estimate_assignment,
    execute_coarse,
)
from .schedule import ExecutionSchedule, Piece, PieceSet, generate_schedule, generate_schedules

CLR = "clr"
CLR_P = "clr-p"
LLR_P = "llr-p"
SCHEMES = (CLR, CLR_P, LLR_P)

__all__ = [
    "CLR", "CLR_P", "LLR_P", "SCHEMES", "PIPELINED", "SYNCHRONOUS",
    "CoreAssignment", "ExecutionSchedule", "Piece", "PieceSet", "RecoveryReport", "ReplayEngine",
    "assign_workers", "dispatch_fine", "estimate_assignment", "execute_coarse",
    "generate_schedule", "generate_schedules", "recover_directory", "recover_llr_p",
    "recover_pipelined", "recover_serial",
]


@dataclass
class RecoveryReport:
    mode: str
    workers: int
    batches: int
    txns: int
    reload_ms: float
    analysis_ms: float
    replay_ms: float
    digest: str
    extras: dict = field(default_factory=dict)

    @property
    def total_ms(self) -> float:
        return self.reload_ms + self.analysis_ms + self.replay_ms

    def to_dict(self) -> dict:
        out = asdict(self)
        extras = out.pop("extras")
        for k in ("reload_ms", "analysis_ms", "replay_ms"):
            out[k] = round(out[k], 3)
        out["total_ms"] = round(out["reload_ms"] + out["analysis_ms"] + out["replay_ms"], 3)
        out.update(extras)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "RecoveryReport":
        core = {k: raw[k] for k in ("mode", "workers", "batches", "txns", "reload_ms",
                                     "analysis_ms", "replay_ms", "digest")}
        extras = {k: v for k, v in raw.items() if k not in core and k != "total_ms"}
        return cls(**core, extras=extras)

    @classmethod
    def load(cls, path) -> "RecoveryReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def recover_serial(
    batches: Iterable[LogBatch], db: Database, procs: Mapping[str, ProcedureIR] | Iterable[ProcedureIR]
) -> RecoveryReport:
    """CLR: single-threaded re-execution in commit order."""
    if not isinstance(procs, Mapping):
        procs = {p.name: p for p in procs}
    t0 = time.perf_counter()
    nbatches, ntxns = replay_serial(db, batches, procs)
    replay_ms = (time.perf_counter() - t0) * 1000
    return RecoveryReport(CLR, 1, nbatches, ntxns, 0.0, 0.0, replay_ms, hex_digest(db))


def recover_pipelined(
    batches: Iterable[LogBatch],
    gdg: GlobalDependencyGraph,
    db: Database,
    workers: int = 1,
    mode: str = PIPELINED,
    fine: bool = True,
    window: int = 4,
    assignment: CoreAssignment | None = None,
) -> RecoveryReport:
    """CLR-P: schedule-driven parallel replay."""
    engine = ReplayEngine(gdg, workers, mode, fine, window, assignment)
    stats = engine.run(db, batches)
    return RecoveryReport(
        CLR_P, workers, stats.batches, stats.txns, 0.0, stats.analysis_ms, stats.replay_ms,
        hex_digest(db),
        {
            "pipeline": mode == PIPELINED,
            "fine": fine,
            "piece_sets": stats.piece_sets,
            "notifications": stats.notifications,
            "fine_piece_sets": stats.fine_piece_sets,
            "fallback_piece_sets": stats.fallback_piece_sets,
            "assignment": {str(b): n for b, n in sorted(engine.assignment.workers.items())},
        },
    )


def recover_llr_p(
    batches: Iterable[LogBatch], db: Database, workers: int = 1, last_writer_wins: bool = False
) -> RecoveryReport:
    """LLR-P: write sets sharded by row hash; raises LogModeError on command entries."""
    t0 = time.perf_counter()
    nbatches, ntxns = replay_logical(db, batches, workers, last_writer_wins)
    replay_ms = (time.perf_counter() - t0) * 1000
    return RecoveryReport(
        LLR_P, workers, nbatches, ntxns, 0.0, 0.0, replay_ms, hex_digest(db),
        {"last_writer_wins": last_writer_wins},
    )


def procedures_in(directory) -> list[ProcedureIR]:
    """Procedure sources archived next to a log by ``pacman run``."""
    paths = sorted((Path(directory) / "procs").glob("*.proc"))
    return load_procedures(paths)


def recover_directory(
    directory,
    scheme: str = CLR_P,
    workers: int = 1,
    pipeline: bool = True,
    fine: bool = True,
    procs: Iterable[ProcedureIR] | None = None,
    last_writer_wins: bool = False,
    stream: bool = False,
    window: int = 4,
) -> tuple[RecoveryReport, Database]:
    """Restore the checkpoint of ``directory`` and replay its log with ``scheme``."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {', '.join(SCHEMES)}")
    directory = Path(directory)
    t0 = time.perf_counter()
    manifest = Manifest.load(directory)
    pepoch = read_pepoch(directory)
    db = load_checkpoint(directory, manifest)
    batches = reload_ahead(directory) if stream else list(load_batches(directory))
    reload_ms = (time.perf_counter() - t0) * 1000
    procs = list(procs) if procs is not None else procedures_in(directory)
    db.ensure_tables(t for p in procs for t in p.tables)
    if scheme == CLR:
        report = recover_serial(batches, db, procs)
    elif scheme == LLR_P:
        report = recover_llr_p(batches, db, workers, last_writer_wins)
    else:
        t1 = time.perf_counter()
        _, gdg = analyze(procs)
        graph_ms = (time.perf_counter() - t1) * 1000
        report = recover_pipelined(
            batches, gdg, db, workers, PIPELINED if pipeline else SYNCHRONOUS, fine, window
        )
        report.analysis_ms += graph_ms
    report.reload_ms = reload_ms
    report.extras.update({"checkpoint_epoch": manifest.checkpoint_epoch, "pepoch": pepoch})
    return report, db
