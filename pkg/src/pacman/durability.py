"""Epoch-based group commit, log batch files, pepoch tracking and checkpoints.

On-disk layout of a data directory::

    log.<lane>.<batch>       framed log entries of one lane for one batch
    pepoch.log               ASCII decimal: newest epoch persisted by every lane
    checkpoint.<epoch>.db    table snapshot taken at the end of <epoch>
    manifest.json            lanes, batch size, batch start epochs, checkpoint

A log frame is ``[u32 len][u64 commit_seq][u64 epoch][u8 tag][body][u32 crc]``
(little-endian), where ``len`` counts the bytes between it and the crc and the
crc covers those same bytes.  ``tag`` 1 is a command body (procedure name and
arguments), tag 2 a logical body (ordered write set).  docs/file-formats.md
has the byte-level details.

Entries reach disk only through :meth:`Logger.flush`, which writes every
complete epoch of every lane before advancing pepoch.  Recovery ignores
anything newer than pepoch, so a crash can never expose a transaction whose
commit was not acknowledged.
"""

from __future__ import annotations

import bisect
import heapq
import json
import os
import queue
import re
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence, Union

from .errors import CheckpointError, FlushError, IntegrityError
from .storage import TOMBSTONE, Database, decode_scalar, encode_scalar, restore, snapshot

LOG_MAGIC = b"PCLG"
LOG_VERSION = 1
MANIFEST_VERSION = 1
TAG_COMMAND = 1
TAG_ADHOC = 2
_TAG_TOMBSTONE = 2

_FILE_HEADER = struct.Struct("<4sHII")  # magic, version, lane, batch id
_FRAME_HEAD = struct.Struct("<IQQB")  # len, commit_seq, epoch, tag
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")

COMMAND = "command"
LOGICAL = "logical"


@dataclass(frozen=True)
class Command:
    proc: str
    args: tuple


@dataclass(frozen=True)
class AdHoc:
    write_set: tuple  # ((table, key, value | TOMBSTONE), ...)


@dataclass(frozen=True)
class LogEntry:
    commit_seq: int
    epoch: int
    body: Union[Command, AdHoc]


@dataclass(frozen=True)
class LogBatch:
    batch_id: int
    entries: tuple[LogEntry, ...]

    @property
    def epoch_range(self) -> tuple[int, int]:
        return (self.entries[0].epoch, self.entries[-1].epoch) if self.entries else (0, 0)

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class PepochState:
    persisted_epoch: int


# ---------------------------------------------------------------------------
# encoding


def _encode_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return _U16.pack(len(raw)) + raw


def _decode_name(buf: bytes, pos: int) -> tuple[str, int]:
    (n,) = _U16.unpack_from(buf, pos)
    end = pos + 2 + n
    if end > len(buf):
        raise ValueError("name runs past end of frame")
    return buf[pos + 2:end].decode("utf-8"), end


def encode_command(proc: str, args) -> bytes:
    return _encode_name(proc) + _U16.pack(len(args)) + b"".join(encode_scalar(a) for a in args)


def encode_adhoc(write_set) -> bytes:
    parts = [_U32.pack(len(write_set))]
    for table, key, value in write_set:
        parts.append(_encode_name(table))
        parts.append(encode_scalar(key))
        parts.append(bytes((_TAG_TOMBSTONE,)) if value is TOMBSTONE else encode_scalar(value))
    return b"".join(parts)


def encode_body(body) -> tuple[int, bytes]:
    if isinstance(body, Command):
        return TAG_COMMAND, encode_command(body.proc, body.args)
    return TAG_ADHOC, encode_adhoc(body.write_set)


def encode_frame(commit_seq: int, epoch: int, tag: int, body: bytes) -> bytes:
    head = _FRAME_HEAD.pack(17 + len(body), commit_seq, epoch, tag)
    payload = head[4:] + body
    return head[:4] + payload + _U32.pack(zlib.crc32(payload))


def encode_entry(entry: LogEntry) -> bytes:
    tag, body = encode_body(entry.body)
    return encode_frame(entry.commit_seq, entry.epoch, tag, body)


def _decode_body(tag: int, buf: bytes):
    if tag == TAG_COMMAND:
        proc, pos = _decode_name(buf, 0)
        (nargs,) = _U16.unpack_from(buf, pos)
        pos += 2
        args = []
        for _ in range(nargs):
            value, pos = decode_scalar(buf, pos)
            args.append(value)
        body = Command(proc, tuple(args))
    elif tag == TAG_ADHOC:
        (count,) = _U32.unpack_from(buf, 0)
        pos = 4
        items = []
        for _ in range(count):
            table, pos = _decode_name(buf, pos)
            key, pos = decode_scalar(buf, pos)
            if buf[pos] == _TAG_TOMBSTONE:
                value, pos = TOMBSTONE, pos + 1
            else:
                value, pos = decode_scalar(buf, pos)
            items.append((table, key, value))
        body = AdHoc(tuple(items))
    else:
        raise ValueError(f"unknown body tag {tag}")
    if pos != len(buf):
        raise ValueError("trailing bytes in body")
    return body


def decode_frames(data: bytes, path=None, start: int = _FILE_HEADER.size):
    """Yield ``(offset, LogEntry)`` for each intact frame.

    A frame cut short by the end of the data (a torn write) ends iteration
    silently; a complete frame that fails its checksum raises IntegrityError.
    """
    pos, end = start, len(data)
    while pos < end:
        if pos + 4 > end:
            return
        (length,) = _U32.unpack_from(data, pos)
        stop = pos + 4 + length + 4
        if stop > end:
            return
        payload = data[pos + 4:pos + 4 + length]
        (crc,) = _U32.unpack_from(data, pos + 4 + length)
        if length < 17 or crc != zlib.crc32(payload):
            raise IntegrityError(f"log frame checksum mismatch at offset {pos}", path)
        seq, epoch, tag = struct.unpack_from("<QQB", payload, 0)
        try:
            body = _decode_body(tag, payload[17:])
        except (ValueError, struct.error, UnicodeDecodeError, IndexError) as exc:
            raise IntegrityError(f"malformed log frame at offset {pos}: {exc}", path) from None
        yield pos, LogEntry(seq, epoch, body)
        pos = stop


def file_header(lane: int, batch_id: int) -> bytes:
    return _FILE_HEADER.pack(LOG_MAGIC, LOG_VERSION, lane, batch_id)


def _check_header(data: bytes, lane: int, batch_id: int, path) -> None:
    if len(data) < _FILE_HEADER.size:
        raise IntegrityError("log file header truncated", path)
    magic, version, hlane, hbatch = _FILE_HEADER.unpack_from(data, 0)
    if magic != LOG_MAGIC or version != LOG_VERSION:
        raise IntegrityError("not a log file", path)
    if (hlane, hbatch) != (lane, batch_id):
        raise IntegrityError(f"header says lane {hlane} batch {hbatch}", path)


# ---------------------------------------------------------------------------
# small files


def _atomic_write(path: Path, data: bytes, fsync: bool) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        if fsync:
            f.flush()
            os.fsync(f.fileno())
    os.replace(tmp, path)


def read_pepoch(directory) -> int:
    path = Path(directory) / "pepoch.log"
    try:
        text = path.read_text(encoding="ascii")
    except FileNotFoundError:
        raise IntegrityError("pepoch.log missing", path) from None
    if not re.fullmatch(r"\d+\n?", text):
        raise IntegrityError(f"pepoch.log is not a decimal epoch: {text!r}", path)
    return int(text)


@dataclass
class Manifest:
    lanes: int
    batch_epochs: int
    batch_starts: list
    checkpoint_epoch: int = 0
    checkpoint_next_seq: int = 1
    mode: str = COMMAND

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": "pacman-manifest",
                "version": MANIFEST_VERSION,
                "lanes": self.lanes,
                "batch_epochs": self.batch_epochs,
                "batch_starts": self.batch_starts,
                "checkpoint_epoch": self.checkpoint_epoch,
                "checkpoint_next_seq": self.checkpoint_next_seq,
                "mode": self.mode,
            },
            indent=2,
        ) + "\n"

    @classmethod
    def load(cls, directory) -> "Manifest":
        path = Path(directory) / "manifest.json"
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
            if raw.get("format") != "pacman-manifest" or raw.get("version") != MANIFEST_VERSION:
                raise ValueError("unrecognized manifest format")
            return cls(
                lanes=int(raw["lanes"]),
                batch_epochs=int(raw["batch_epochs"]),
                batch_starts=[int(x) for x in raw["batch_starts"]],
                checkpoint_epoch=int(raw["checkpoint_epoch"]),
                checkpoint_next_seq=int(raw["checkpoint_next_seq"]),
                mode=raw.get("mode", COMMAND),
            )
        except FileNotFoundError:
            raise IntegrityError("manifest.json missing", path) from None
        except (ValueError, KeyError, TypeError) as exc:
            raise IntegrityError(f"bad manifest: {exc}", path) from None

    def batch_for(self, epoch: int) -> int:
        return max(bisect.bisect_right(self.batch_starts, epoch) - 1, 0)


def log_path(directory, lane: int, batch_id: int) -> Path:
    return Path(directory) / f"log.{lane}.{batch_id}"


def checkpoint_path(directory, epoch: int) -> Path:
    return Path(directory) / f"checkpoint.{epoch}.db"


# ---------------------------------------------------------------------------
# logger


class Logger:
    """Per-lane epoch buffers plus the flush/pepoch protocol.

    ``log_commit`` may be called from any thread.  Epoch advancement,
    flushing and checkpointing are driven by one coordinator thread.
    """

    def __init__(
        self,
        directory,
        lanes: int = 2,
        batch_epochs: int = 100,
        fsync: bool = False,
        mode: str = COMMAND,
        measure_both: bool = False,
    ):
        if lanes < 1 or batch_epochs < 1:
            raise ValueError("lanes and batch_epochs must be positive")
        if mode not in (COMMAND, LOGICAL):
            raise ValueError(f"unknown log mode {mode!r}")
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self.measure_both = measure_both
        self.bytes_command = 0
        self.bytes_logical = 0
        self.bytes_written = 0
        self._mutex = threading.Lock()
        if (self.dir / "manifest.json").exists():
            self._reopen(lanes, batch_epochs, mode)
        else:
            self.manifest = Manifest(lanes, batch_epochs, [1], mode=mode)
            self.epoch = 1
            self.pepoch = 0
            self.lane_persisted = [0] * lanes
            _atomic_write(self.dir / "pepoch.log", b"0\n", fsync)
            self._write_manifest()
        self.lanes = self.manifest.lanes
        self.mode = self.manifest.mode
        self._buffers: list[dict[int, list[bytes]]] = [{} for _ in range(self.lanes)]

    # -- restart

    def _reopen(self, lanes, batch_epochs, mode):
        self.manifest = Manifest.load(self.dir)
        if (self.manifest.lanes, self.manifest.batch_epochs) != (lanes, batch_epochs):
            raise ValueError(
                f"existing log uses lanes={self.manifest.lanes} "
                f"batch_epochs={self.manifest.batch_epochs}"
            )
        if self.manifest.mode != mode:
            raise ValueError(f"existing log uses mode {self.manifest.mode!r}")
        self.pepoch = read_pepoch(self.dir)
        m = self.manifest
        keep = [s for s in m.batch_starts if s <= self.pepoch] or [1]
        last_kept = len(keep) - 1
        for lane in range(m.lanes):
            for b in range(len(m.batch_starts)):
                path = log_path(self.dir, lane, b)
                if b > last_kept:
                    path.unlink(missing_ok=True)
                elif path.exists():
                    self._trim(path, lane, b)
        # resume in a fresh batch so sealed files are never reopened mid-epoch
        self.epoch = self.pepoch + 1
        m.batch_starts = keep + ([self.epoch] if keep[-1] != self.epoch else [])
        self.lane_persisted = [self.pepoch] * m.lanes
        self._write_manifest()

    def _trim(self, path: Path, lane: int, batch_id: int) -> None:
        data = path.read_bytes()
        _check_header(data, lane, batch_id, path)
        cut = _FILE_HEADER.size
        for pos, entry in decode_frames(data, path):
            if entry.epoch > self.pepoch:
                break
            cut = pos + 4 + _U32.unpack_from(data, pos)[0] + 4
        if cut != len(data):
            with open(path, "r+b") as f:
                f.truncate(cut)

    # -- normal processing

    def lane_for(self, commit_seq: int) -> int:
        return commit_seq % self.lanes

    def log_commit(self, result, request) -> None:
        """Buffer a committed transaction's entry in its epoch (no I/O)."""
        if not result.committed:
            return
        epoch = result.epoch if result.epoch is not None else self.epoch
        if request.adhoc or self.mode == LOGICAL:
            tag, body = TAG_ADHOC, encode_adhoc(result.write_set)
        else:
            tag, body = TAG_COMMAND, encode_command(request.proc, request.args)
        frame = encode_frame(result.commit_seq, epoch, tag, body)
        if self.measure_both:
            if tag == TAG_COMMAND:
                other = len(encode_adhoc(result.write_set)) + 25
                self.bytes_command += len(frame)
                self.bytes_logical += other
            else:
                other = len(encode_command(request.proc, request.args)) + 25
                self.bytes_logical += len(frame)
                self.bytes_command += len(frame) if request.adhoc else other
        lane = self.lane_for(result.commit_seq)
        with self._mutex:
            self._buffers[lane].setdefault(epoch, []).append(frame)

    def append(self, entry: LogEntry) -> None:
        """Buffer a pre-built entry (tests and tools)."""
        frame = encode_entry(entry)
        with self._mutex:
            self._buffers[self.lane_for(entry.commit_seq)].setdefault(entry.epoch, []).append(frame)

    def current_epoch(self) -> int:
        return self.epoch

    def advance_epoch(self) -> int:
        """Close the current epoch; a new batch starts every ``batch_epochs`` epochs."""
        with self._mutex:
            self.epoch += 1
            m = self.manifest
            if self.epoch - m.batch_starts[-1] >= m.batch_epochs:
                m.batch_starts.append(self.epoch)
            return self.epoch

    def rotate_batch(self) -> int:
        """Seal the current batch early; returns the id of the sealed batch.

        The current epoch is closed first so that no epoch straddles two
        batches.  Does nothing but flush if the open batch holds no entries.
        """
        sealed = len(self.manifest.batch_starts) - 1
        start = self.manifest.batch_starts[-1]
        self.advance_epoch()
        with self._mutex:
            has_entries = any(
                epoch >= start for buf in self._buffers for epoch, frames in buf.items() if frames
            ) or any(
                log_path(self.dir, lane, sealed).exists()
                and log_path(self.dir, lane, sealed).stat().st_size > _FILE_HEADER.size
                for lane in range(self.lanes)
            )
            if has_entries and self.manifest.batch_starts[-1] != self.epoch:
                self.manifest.batch_starts.append(self.epoch)
        self.flush()
        return sealed

    def flush(self, lanes: Sequence[int] | None = None) -> PepochState:
        """Persist every complete epoch of the given lanes (default all), then pepoch.

        A lane that is not flushed keeps its old progress, holding pepoch
        back, which is how a slow logger is modelled.
        """
        complete = self.epoch - 1
        targets = range(self.lanes) if lanes is None else lanes
        with self._mutex:
            pending = {}
            for lane in targets:
                buf = self._buffers[lane]
                pending[lane] = {e: buf[e] for e in sorted(buf) if e <= complete}
        for lane, epochs in pending.items():
            self._flush_lane(lane, epochs, complete)
            with self._mutex:
                for e in epochs:
                    self._buffers[lane].pop(e, None)
            self.lane_persisted[lane] = complete
        new = min(self.lane_persisted)
        if new > self.pepoch:
            self._write_manifest()
            _atomic_write(self.dir / "pepoch.log", f"{new}\n".encode("ascii"), self.fsync)
            self.pepoch = new
        return PepochState(self.pepoch)

    def _flush_lane(self, lane: int, epochs: dict, complete: int) -> None:
        m = self.manifest
        last_batch = m.batch_for(complete)
        by_batch: dict[int, list[bytes]] = {}
        for e, frames in epochs.items():
            by_batch.setdefault(m.batch_for(e), []).extend(frames)
        touched: list[tuple[Path, int]] = []
        try:
            for b in range(m.batch_for(self.lane_persisted[lane] + 1), last_batch + 1):
                path = log_path(self.dir, lane, b)
                size = path.stat().st_size if path.exists() else None
                touched.append((path, size))
                data = b"".join(by_batch.get(b, ()))
                if size is None:
                    data = file_header(lane, b) + data
                if data:
                    self._write(path, data)
                    self.bytes_written += len(data)
        except OSError as exc:
            for path, size in touched:
                try:
                    if size is None:
                        path.unlink(missing_ok=True)
                    else:
                        with open(path, "r+b") as f:
                            f.truncate(size)
                except OSError:
                    pass
            raise FlushError(f"lane {lane} flush failed: {exc}") from exc

    def _write(self, path: Path, data: bytes) -> None:
        with open(path, "ab") as f:
            f.write(data)
            if self.fsync:
                f.flush()
                os.fsync(f.fileno())

    def _write_manifest(self) -> None:
        _atomic_write(self.dir / "manifest.json", self.manifest.to_json().encode("utf-8"), self.fsync)

    # -- checkpoints

    def take_checkpoint(self, db: Database, epoch: int, next_seq: int) -> Path:
        """Snapshot ``db`` as the state after all commits of epochs <= ``epoch``.

        Workers must be quiesced.  On failure the previous checkpoint stays
        authoritative and CheckpointError is raised.
        """
        if epoch > self.pepoch:
            raise CheckpointError(f"epoch {epoch} is not persisted yet (pepoch {self.pepoch})")
        if epoch < self.manifest.checkpoint_epoch:
            raise CheckpointError(f"checkpoint epoch {epoch} older than current one")
        path = checkpoint_path(self.dir, epoch)
        try:
            self._write_checkpoint(path, snapshot(db, epoch))
        except OSError as exc:
            path.with_name(path.name + ".tmp").unlink(missing_ok=True)
            raise CheckpointError(f"checkpoint write failed: {exc}") from exc
        previous = self.manifest.checkpoint_epoch
        self.manifest.checkpoint_epoch = epoch
        self.manifest.checkpoint_next_seq = next_seq
        self._write_manifest()
        if previous != epoch:
            checkpoint_path(self.dir, previous).unlink(missing_ok=True)
        return path

    def _write_checkpoint(self, path: Path, data: bytes) -> None:
        _atomic_write(path, data, self.fsync)


# ---------------------------------------------------------------------------
# reload


def load_checkpoint(directory, manifest: Manifest | None = None) -> Database:
    manifest = manifest or Manifest.load(directory)
    path = checkpoint_path(directory, manifest.checkpoint_epoch)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise IntegrityError("checkpoint missing", path) from None
    return restore(data, path)


def load_batches(directory) -> Iterator[LogBatch]:
    """Yield the persisted, post-checkpoint log as batches in batch-id order."""
    directory = Path(directory)
    pepoch = read_pepoch(directory)
    if pepoch == 0 and not (directory / "manifest.json").exists():
        return
    m = Manifest.load(directory)
    expected = m.checkpoint_next_seq
    for b, start in enumerate(m.batch_starts):
        if start > pepoch:
            break
        end = m.batch_starts[b + 1] - 1 if b + 1 < len(m.batch_starts) else pepoch
        if end <= m.checkpoint_epoch:
            continue
        streams = []
        for lane in range(m.lanes):
            path = log_path(directory, lane, b)
            try:
                data = path.read_bytes()
            except FileNotFoundError:
                raise IntegrityError(f"log file for lane {lane} batch {b} missing", path) from None
            _check_header(data, lane, b, path)
            entries = [
                e for _, e in decode_frames(data, path) if m.checkpoint_epoch < e.epoch <= pepoch
            ]
            for prev, cur in zip(entries, entries[1:]):
                if cur.commit_seq <= prev.commit_seq:
                    raise IntegrityError("commit sequence not increasing", path)
            streams.append(entries)
        merged = tuple(heapq.merge(*streams, key=lambda e: e.commit_seq))
        for e in merged:
            if e.commit_seq != expected:
                raise IntegrityError(
                    f"commit sequence gap: expected {expected}, found {e.commit_seq}",
                    log_path(directory, e.commit_seq % m.lanes, b),
                )
            expected += 1
        if merged:
            yield LogBatch(b, merged)


_DONE = object()


def reload_ahead(directory, depth: int = 4) -> Iterator[LogBatch]:
    """``load_batches`` on a producer thread, at most ``depth`` batches ahead."""
    q: queue.Queue = queue.Queue(maxsize=max(depth, 1))
    stop = threading.Event()

    def produce():
        try:
            for batch in load_batches(directory):
                while not stop.is_set():
                    try:
                        q.put(batch, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(_DONE)
        except BaseException as exc:  # handed to the consumer
            q.put(exc)

    thread = threading.Thread(target=produce, name="reload", daemon=True)
    thread.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
