import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from pacman.errors import IntegrityError
from pacman.storage import (
    TOMBSTONE, Database, DuplicateKeyError, MissingKeyError, UnknownTableError, checkpoint_epoch,
    decode_scalar, encode_scalar, hex_digest, restore, snapshot,
)

from oracles import naive_digest

# sha256 of the domain tag alone, computed outside the package
EMPTY_DIGEST = "579187aa80e46495efe4329e536ebc95666476ffc24cdc872c20ca99bab1075f"

keys = st.one_of(st.integers(-2**63, 2**63 - 1), st.text(max_size=6))
rows = st.dictionaries(
    st.sampled_from(["A", "B", "Current", "ü"]),
    st.dictionaries(keys, keys, max_size=8),
    max_size=3,
)


def build(tables):
    db = Database(tables)
    for name, content in tables.items():
        for k, v in content.items():
            db.put(name, k, v)
    return db


def test_basic_operations():
    db = Database(["T"])
    assert db.get("T", "k") is None
    db.put("T", "k", 1)
    assert db.get("T", "k") == 1
    db.put("T", "k", 2)
    assert db.get("T", "k") == 2
    with pytest.raises(DuplicateKeyError):
        db.insert("T", "k", 3)
    db.delete("T", "k")
    assert db.get("T", "k") is None
    with pytest.raises(MissingKeyError):
        db.delete("T", "k")
    with pytest.raises(UnknownTableError):
        db.get("Nope", 1)
    db.apply("T", 5, "v")
    db.apply("T", 5, TOMBSTONE)
    assert db.row_count() == 0


def test_empty_digest_frozen():
    assert hex_digest(Database()) == EMPTY_DIGEST


def test_digest_examples():
    a = Database(["T"])
    a.put("T", "x", 1)
    a.put("T", "y", 2)
    b = Database(["T"])
    b.put("T", "y", 2)
    b.put("T", "x", 1)
    assert hex_digest(a) == hex_digest(b)
    b.put("T", "x", 3)
    assert hex_digest(a) != hex_digest(b)


def test_empty_table_changes_digest():
    assert hex_digest(Database(["T"])) != hex_digest(Database())


def test_int_and_str_keys_are_distinct():
    a, b = Database(["T"]), Database(["T"])
    a.put("T", 1, 1)
    b.put("T", "1", 1)
    assert hex_digest(a) != hex_digest(b)


@settings(max_examples=200)
@given(rows)
def test_digest_matches_independent_encoding(tables):
    db = build(tables)
    assert hex_digest(db) == naive_digest(db)


@settings(max_examples=100)
@given(rows, st.randoms(use_true_random=False))
def test_digest_ignores_insertion_order(tables, rnd):
    items = [(t, k, v) for t, c in tables.items() for k, v in c.items()]
    rnd.shuffle(items)
    db = Database(tables)
    for t, k, v in items:
        db.put(t, k, v)
    assert hex_digest(db) == hex_digest(build(tables))


@settings(max_examples=100)
@given(keys)
def test_scalar_round_trip(value):
    raw = encode_scalar(value)
    assert decode_scalar(raw, 0) == (value, len(raw))


@settings(max_examples=100)
@given(rows, st.integers(0, 2**40))
def test_snapshot_round_trip(tables, epoch):
    db = build(tables)
    data = snapshot(db, epoch)
    assert checkpoint_epoch(data) == epoch
    back = restore(data)
    assert hex_digest(back) == hex_digest(db)
    assert set(back.tables) == set(db.tables)


def test_snapshot_20k_rows():
    rng = random.Random(7)
    db = Database(["A", "B"])
    for i in range(20_000):
        key = rng.randrange(10**9) if i % 2 else f"k{rng.randrange(10**9)}"
        db.put(rng.choice("AB"), key, rng.choice([rng.randrange(-10**6, 10**6), "s" * rng.randrange(5)]))
    assert hex_digest(restore(snapshot(db, 3))) == hex_digest(db)


def test_empty_snapshot():
    assert restore(snapshot(Database(), 0)).row_count() == 0


def test_truncated_snapshot_raises():
    db = build({"T": {i: i for i in range(50)}})
    data = snapshot(db, 9)
    for cut in (0, 5, len(data) // 2, len(data) - 1):
        with pytest.raises(IntegrityError) as info:
            restore(data[:cut], "checkpoint.9.db")
        assert "checkpoint.9.db" in str(info.value)


def test_flipped_byte_raises():
    data = bytearray(snapshot(build({"T": {1: 2}}), 1))
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(IntegrityError):
        restore(bytes(data))


def test_bad_magic_raises():
    data = b"XXXX" + snapshot(Database(), 0)[4:]
    with pytest.raises(IntegrityError):
        restore(data)


def test_concurrent_disjoint_writes():
    db = Database(["T"])

    def writer(w):
        for i in range(2_000):
            db.put("T", (w << 20) | i, i)

    threads = [threading.Thread(target=writer, args=(w,)) for w in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    serial = Database(["T"])
    for w in range(8):
        for i in range(2_000):
            serial.put("T", (w << 20) | i, i)
    assert hex_digest(db) == hex_digest(serial)


def test_copy_and_clear():
    db = build({"T": {1: 1}})
    other = db.copy()
    other.put("T", 2, 2)
    assert db.row_count() == 1 and other.row_count() == 2
    db.clear()
    assert db.row_count() == 0 and "T" in db.tables
    assert db != other
