"""Single-version in-memory tables and their checkpoint encoding.

Each table is a plain ``dict`` from key to value, which doubles as the
primary-key hash index.  Keys and values are ``int`` or ``str``.  The
mutators perform no locking: callers guarantee that concurrent writers touch
distinct keys (2PL during normal processing, schedule construction during
recovery), and CPython dict operations on distinct keys are individually
atomic.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from typing import Iterable, Iterator, Union

from .errors import IntegrityError

Key = Union[int, str]
Value = Union[int, str]


class StorageError(Exception):
    """Base class for storage-level operation failures."""


class UnknownTableError(StorageError, KeyError):
    def __str__(self):
        return f"unknown table {self.args[0]!r}"


class DuplicateKeyError(StorageError):
    """Insert of a key that already exists."""


class MissingKeyError(StorageError):
    """Delete of a key that does not exist."""


class _Tombstone:
    """Write-set marker for a deleted row."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "TOMBSTONE"

    def __reduce__(self):
        return (_Tombstone, ())


TOMBSTONE = _Tombstone()


class Database:
    def __init__(self, tables: Iterable[str] = ()):
        self.tables: dict[str, dict[Key, Value]] = {}
        for name in tables:
            self.create_table(name)

    def create_table(self, name: str) -> dict:
        if name in self.tables:
            raise ValueError(f"table {name!r} already exists")
        rows = self.tables[name] = {}
        return rows

    def ensure_tables(self, names: Iterable[str]) -> None:
        for name in names:
            if name not in self.tables:
                self.tables[name] = {}

    def table(self, name: str) -> dict:
        try:
            return self.tables[name]
        except KeyError:
            raise UnknownTableError(name) from None

    def get(self, table: str, key: Key) -> Value | None:
        return self.table(table).get(key)

    def put(self, table: str, key: Key, value: Value) -> None:
        self.table(table)[key] = value

    def insert(self, table: str, key: Key, value: Value) -> None:
        rows = self.table(table)
        if key in rows:
            raise DuplicateKeyError(f"{table}[{key!r}] already exists")
        rows[key] = value

    def delete(self, table: str, key: Key) -> None:
        rows = self.table(table)
        try:
            del rows[key]
        except KeyError:
            raise MissingKeyError(f"{table}[{key!r}] does not exist") from None

    def apply(self, table: str, key: Key, value) -> None:
        """Install one logical write-set item (blind upsert or tombstone)."""
        rows = self.table(table)
        if value is TOMBSTONE:
            rows.pop(key, None)
        else:
            rows[key] = value

    def clear(self) -> None:
        for rows in self.tables.values():
            rows.clear()

    def copy(self) -> "Database":
        other = Database()
        other.tables = {name: dict(rows) for name, rows in self.tables.items()}
        return other

    def row_count(self) -> int:
        return sum(len(rows) for rows in self.tables.values())

    def rows(self) -> Iterator[tuple[str, Key, Value]]:
        """All rows in canonical order: table name, then ints before strings, then value."""
        for name in sorted(self.tables):
            for key in sorted(self.tables[name], key=_sort_key):
                yield name, key, self.tables[name][key]

    def __eq__(self, other):
        if not isinstance(other, Database):
            return NotImplemented
        return state_digest(self) == state_digest(other)

    def __repr__(self):
        sizes = ", ".join(f"{n}={len(r)}" for n, r in sorted(self.tables.items()))
        return f"Database({sizes})"


def _sort_key(key):
    return (0, key, "") if type(key) is int else (1, 0, key)


# ---------------------------------------------------------------------------
# canonical encoding

_TAG_INT = 0
_TAG_STR = 1
_I64 = struct.Struct("<q")
_U32 = struct.Struct("<I")


def encode_scalar(value: Value) -> bytes:
    if type(value) is int:
        return bytes((_TAG_INT,)) + _I64.pack(value)
    if type(value) is str:
        raw = value.encode("utf-8")
        return bytes((_TAG_STR,)) + _U32.pack(len(raw)) + raw
    raise TypeError(f"unsupported key/value type {type(value).__name__}")


def decode_scalar(buf: bytes, pos: int) -> tuple[Value, int]:
    tag = buf[pos]
    if tag == _TAG_INT:
        return _I64.unpack_from(buf, pos + 1)[0], pos + 9
    if tag == _TAG_STR:
        (n,) = _U32.unpack_from(buf, pos + 1)
        end = pos + 5 + n
        if end > len(buf):
            raise ValueError("string runs past end of buffer")
        return buf[pos + 5:end].decode("utf-8"), end
    raise ValueError(f"bad scalar tag {tag}")


_DIGEST_DOMAIN = b"pacman-state-v1\0"


def state_digest(db: Database) -> bytes:
    """SHA-256 over the canonical (table, key, value) row sequence."""
    h = hashlib.sha256(_DIGEST_DOMAIN)
    for name in sorted(db.tables):
        raw = name.encode("utf-8")
        h.update(b"T" + _U32.pack(len(raw)) + raw)
        rows = db.tables[name]
        for key in sorted(rows, key=_sort_key):
            h.update(encode_scalar(key) + encode_scalar(rows[key]))
    return h.digest()


def hex_digest(db: Database) -> str:
    return state_digest(db).hex()


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"PCKP"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHQI")  # magic, version, epoch, table count


def snapshot(db: Database, epoch: int = 0) -> bytes:
    """Serialize every row; the caller must have quiesced writers."""
    parts = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, epoch, len(db.tables))]
    for name in sorted(db.tables):
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)) + raw)
    rows = list(db.rows())
    parts.append(struct.pack("<Q", len(rows)))
    for name, key, value in rows:
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)) + raw + encode_scalar(key) + encode_scalar(value))
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def checkpoint_epoch(data: bytes, path=None) -> int:
    if len(data) < _HEADER.size + 4:
        raise IntegrityError("checkpoint truncated", path)
    magic, version, epoch, _ = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise IntegrityError("not a checkpoint file", path)
    return epoch


def restore(data: bytes, path=None) -> Database:
    """Inverse of :func:`snapshot`; raises IntegrityError on any corruption."""
    checkpoint_epoch(data, path)
    body, trailer = data[:-4], data[-4:]
    if _U32.unpack(trailer)[0] != zlib.crc32(body):
        raise IntegrityError("checkpoint checksum mismatch", path)
    try:
        _, _, _, ntables = _HEADER.unpack_from(body, 0)
        pos = _HEADER.size
        db = Database()
        for _ in range(ntables):
            (n,) = _U32.unpack_from(body, pos)
            db.create_table(body[pos + 4:pos + 4 + n].decode("utf-8"))
            pos += 4 + n
        (nrows,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        tables = db.tables
        for _ in range(nrows):
            (n,) = _U32.unpack_from(body, pos)
            name = body[pos + 4:pos + 4 + n].decode("utf-8")
            key, pos = decode_scalar(body, pos + 4 + n)
            value, pos = decode_scalar(body, pos)
            tables[name][key] = value
        if pos != len(body):
            raise ValueError("trailing bytes")
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"malformed checkpoint: {exc}", path) from None
    return db
