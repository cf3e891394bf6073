"""Workload runs with logging, simulated crashes, and recovery benchmarks.

``run_to_directory`` drives a workload through the transaction runtime with
epoch group commit and periodic checkpoints, optionally "crashing" partway
through an epoch.  The crash is simulated in-process: the crash epoch runs
only a random fraction of its transactions, a random proper subset of the
logger lanes writes that epoch out (possibly leaving a torn frame behind),
and pepoch is never advanced past the previous epoch.
"""

from __future__ import annotations

import csv
import io
import json
import random
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .durability import COMMAND, LOGICAL, Logger, log_path, read_pepoch
from .recovery import CLR, CLR_P, LLR_P, SCHEMES, RecoveryReport, recover_directory
from .storage import hex_digest
from .txn import Runtime
from .workloads import WORKLOADS, make_workload

RUN_FILE = "run.json"


@dataclass
class BenchConfig:
    workload: str = "bank"
    txn_count: int = 10_000
    key_count: int = 1_000
    worker_count: int = 1
    epoch_ms: float = 10.0
    epoch_txns: int | None = None  # deterministic epochs of this many requests
    batch_epochs: int = 100
    adhoc_pct: float = 0.0
    checkpoint_every_epochs: int = 0  # 0: only the initial checkpoint
    seed: int = 0
    crash_epoch: int | None = None
    lanes: int = 2
    log_mode: str = COMMAND
    record_trail: bool = True

    def validate(self) -> None:
        if self.workload not in WORKLOADS:
            raise ValueError(f"unknown workload {self.workload!r}; choose from {', '.join(WORKLOADS)}")
        for name in ("txn_count", "key_count", "worker_count", "batch_epochs", "lanes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.adhoc_pct <= 100:
            raise ValueError("adhoc_pct must be within 0..100")
        if self.epoch_txns is not None and self.epoch_txns < 1:
            raise ValueError("epoch_txns must be positive")
        if self.epoch_txns is None and self.epoch_ms <= 0:
            raise ValueError("epoch_ms must be positive")
        if self.checkpoint_every_epochs < 0:
            raise ValueError("checkpoint_every_epochs must be >= 0")
        if self.crash_epoch is not None and self.crash_epoch < 1:
            raise ValueError("crash_epoch must be >= 1")
        if self.log_mode not in (COMMAND, LOGICAL):
            raise ValueError(f"log_mode must be {COMMAND!r} or {LOGICAL!r}")


@dataclass
class RunRecord:
    config: dict
    committed: int = 0
    aborted: int = 0
    restarts: int = 0
    epochs: int = 0
    crashed: bool = False
    pepoch: int = 0
    checkpoints: list = field(default_factory=list)
    trail: list = field(default_factory=list)  # {"epoch", "next_seq", "digest"} per flush
    log_bytes_cl: int = 0
    log_bytes_ll: int = 0
    log_bytes_written: int = 0
    elapsed_ms: float = 0.0

    def persisted_digest(self) -> str | None:
        for point in self.trail:
            if point["epoch"] == self.pepoch:
                return point["digest"]
        return None

    def save(self, directory) -> None:
        Path(directory, RUN_FILE).write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "RunRecord":
        raw = json.loads(Path(directory, RUN_FILE).read_text(encoding="utf-8"))
        return cls(**raw)


_OWNED = ("log.*", "checkpoint.*", "pepoch.log", "pepoch.log.tmp", "manifest.json",
          "manifest.json.tmp", RUN_FILE)


def clear_data_dir(directory) -> None:
    """Remove files a previous run left in ``directory`` (and nothing else)."""
    directory = Path(directory)
    for pattern in _OWNED:
        for path in directory.glob(pattern):
            path.unlink()
    shutil.rmtree(directory / "procs", ignore_errors=True)


def _has_run_files(directory: Path) -> bool:
    return any(any(directory.glob(p)) for p in _OWNED) or (directory / "procs").exists()


def run_to_directory(config: BenchConfig, out, force: bool = False) -> RunRecord:
    """Execute ``config``'s workload with logging into ``out``; see module docstring."""
    config.validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if _has_run_files(out):
        if not force:
            raise FileExistsError(f"{out} already holds a run; pass force=True (--force) to replace it")
        clear_data_dir(out)
    started = time.perf_counter()
    wl = make_workload(config.workload, config.seed)
    db = wl.create_database(config.key_count, random.Random(f"{config.seed}-db"))
    requests = wl.requests(
        config.txn_count, config.key_count, random.Random(f"{config.seed}-req"), config.adhoc_pct
    )
    crash_rng = random.Random(f"{config.seed}-crash")

    (out / "procs").mkdir()
    for name, text in wl.sources.items():
        (out / "procs" / name).write_text(text, encoding="utf-8")

    logger = Logger(out, config.lanes, config.batch_epochs, mode=config.log_mode, measure_both=True)
    record = RunRecord(config=asdict(config))
    logger.take_checkpoint(db, 0, 1)
    record.checkpoints.append(0)
    if config.record_trail:
        record.trail.append({"epoch": 0, "next_seq": 1, "digest": hex_digest(db)})

    runtime = Runtime(db, wl.registry, config.worker_count, logger.log_commit, logger.current_epoch)
    position = 0

    def epoch_requests(limit_fraction: float = 1.0):
        nonlocal position
        if config.epoch_txns is not None:
            count = int(config.epoch_txns * limit_fraction)
            chunk = requests[position:position + count]
            position += len(chunk)
            yield from chunk
            return
        deadline = time.perf_counter() + config.epoch_ms * limit_fraction / 1000
        while position < len(requests) and time.perf_counter() < deadline:
            position += 1
            yield requests[position - 1]

    try:
        while position < len(requests):
            epoch = logger.current_epoch()
            if config.crash_epoch is not None and epoch == config.crash_epoch:
                committed, aborted = runtime.run(epoch_requests(crash_rng.random()))
                record.committed += len(committed)
                record.aborted += len(aborted)
                _simulate_crash(logger, crash_rng)
                record.crashed = True
                break
            committed, aborted = runtime.run(epoch_requests())
            record.committed += len(committed)
            record.aborted += len(aborted)
            logger.advance_epoch()
            logger.flush()
            if config.record_trail:
                record.trail.append(
                    {"epoch": epoch, "next_seq": runtime.next_seq, "digest": hex_digest(db)}
                )
            every = config.checkpoint_every_epochs
            if every and epoch % every == 0:
                logger.take_checkpoint(db, epoch, runtime.next_seq)
                record.checkpoints.append(epoch)
    finally:
        runtime.close()
    record.restarts = runtime.restarts
    record.epochs = logger.current_epoch() - 1
    record.pepoch = read_pepoch(out)
    record.log_bytes_cl = logger.bytes_command
    record.log_bytes_ll = logger.bytes_logical
    record.log_bytes_written = logger.bytes_written
    record.elapsed_ms = (time.perf_counter() - started) * 1000
    record.save(out)
    return record


def _simulate_crash(logger: Logger, rng: random.Random) -> None:
    """Persist the open epoch on a random proper subset of lanes, then stop."""
    lanes = list(range(logger.lanes))
    rng.shuffle(lanes)
    survivors = sorted(lanes[: rng.randrange(logger.lanes)])
    logger.advance_epoch()
    if survivors:
        logger.flush(survivors)
    if rng.random() < 0.5:
        # a torn frame: the lane died part-way through its next write
        lane = rng.randrange(logger.lanes)
        path = log_path(logger.dir, lane, logger.manifest.batch_for(logger.epoch - 1))
        if path.exists():
            with open(path, "ab") as f:
                f.write(b"\x40\x00\x00\x00\x07\x00\x00")


# ---------------------------------------------------------------------------
# benchmark matrix

CSV_COLUMNS = (
    "workload", "scheme", "workers", "pipeline", "reload_ms", "replay_ms", "total_ms",
    "log_bytes_cl", "log_bytes_ll", "digest_ok",
)


@dataclass
class BenchRow:
    workload: str
    scheme: str
    workers: int
    pipeline: bool | None
    reload_ms: float
    replay_ms: float
    total_ms: float
    log_bytes_cl: int
    log_bytes_ll: int
    digest_ok: bool


def bench_matrix(
    config: BenchConfig,
    out,
    schemes: Sequence[str] = SCHEMES,
    workers: Sequence[int] = (1, 2, 4),
    pipelines: Sequence[bool] = (True, False),
    fine: bool = True,
) -> list[BenchRow]:
    """Run once per log mode needed, then recover with every scheme configuration.

    Every row is checked against CLR on the same directory before it is reported.
    """
    for s in schemes:
        if s not in SCHEMES:
            raise ValueError(f"unknown scheme {s!r}")
    out = Path(out)
    rows = []
    modes = []
    if any(s in (CLR, CLR_P) for s in schemes):
        modes.append(COMMAND)
    if LLR_P in schemes:
        modes.append(LOGICAL)
    for mode in modes:
        cfg = BenchConfig(**{**asdict(config), "log_mode": mode, "record_trail": False})
        directory = out / mode
        record = run_to_directory(cfg, directory, force=True)
        oracle, _ = recover_directory(directory, CLR)
        if mode == COMMAND:
            matrix = [(CLR, 1, None)] if CLR in schemes else []
            if CLR_P in schemes:
                matrix += [(CLR_P, w, p) for w in workers for p in pipelines]
        else:
            matrix = [(LLR_P, w, None) for w in workers]
        for scheme, w, pipe in matrix:
            if scheme == CLR:
                report = oracle
            else:
                report, _ = recover_directory(
                    directory, scheme, w, pipeline=bool(pipe) if pipe is not None else True, fine=fine
                )
            rows.append(
                BenchRow(
                    config.workload, scheme, w, pipe,
                    round(report.reload_ms, 3), round(report.replay_ms, 3), round(report.total_ms, 3),
                    record.log_bytes_cl, record.log_bytes_ll, report.digest == oracle.digest,
                )
            )
    return rows


def rows_to_csv(rows: Iterable[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        d = asdict(r)
        d["pipeline"] = "" if r.pipeline is None else ("on" if r.pipeline else "off")
        d["digest_ok"] = "true" if r.digest_ok else "false"
        writer.writerow([d[c] for c in CSV_COLUMNS])
    return buf.getvalue()


def rows_to_table(rows: Sequence[BenchRow]) -> str:
    header = ("scheme", "workers", "pipeline", "reload_ms", "replay_ms", "total_ms", "ok")
    lines = [header]
    for r in rows:
        pipe = "-" if r.pipeline is None else ("on" if r.pipeline else "off")
        lines.append((r.scheme, str(r.workers), pipe, f"{r.reload_ms:.1f}", f"{r.replay_ms:.1f}",
                      f"{r.total_ms:.1f}", "yes" if r.digest_ok else "NO"))
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    text = "\n".join("  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in lines)
    if rows:
        r = rows[0]
        ratio = r.log_bytes_ll / r.log_bytes_cl if r.log_bytes_cl else float("nan")
        text += (f"\n\nlog size: command {r.log_bytes_cl} B, logical {r.log_bytes_ll} B "
                 f"(logical/command = {ratio:.2f})")
    return text + "\n"


__all__ = [
    "BenchConfig", "BenchRow", "RecoveryReport", "RunRecord", "bench_matrix", "clear_data_dir",
    "rows_to_csv", "rows_to_table", "run_to_directory",
]
