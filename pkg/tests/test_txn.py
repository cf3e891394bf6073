import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from pacman.storage import Database, hex_digest
from pacman.txn import (
    EXCLUSIVE, SHARED, LockManager, Runtime, TxnRequest, _Die, execute, run_workload,
)
from pacman.workloads import make_workload

from oracles import serial_replay


def bank_db():
    db = Database(["Customer", "Current", "Saving", "History"])
    db.put("Customer", "Amy", "Bob")
    db.put("Current", "Amy", 100)
    db.put("Current", "Bob", 50)
    db.put("Saving", "Amy", 0)
    db.put("Saving", "Bob", 0)
    return db


def procs_of(bank_procs):
    return {p.name: p for p in bank_procs}


def test_transfer_example(bank_procs):
    db = bank_db()
    res = execute(db, procs_of(bank_procs)["Transfer"], ("Amy", 10))
    assert res.committed
    assert db.get("Current", "Amy") == 90
    assert db.get("Current", "Bob") == 60
    assert db.get("Saving", "Amy") == 1
    assert res.write_set == [("Current", "Amy", 90), ("Current", "Bob", 60), ("Saving", "Amy", 1)]
    assert res.outputs == {"dst": "Bob", "srcVal": 100, "dstVal": 50, "bonus": 0}


def test_transfer_guard_false(bank_procs):
    db = bank_db()
    before = hex_digest(db)
    res = execute(db, procs_of(bank_procs)["Transfer"], ("Bob", 10))
    assert res.committed
    assert res.write_set == []
    assert hex_digest(db) == before


def test_self_transfer_reads_own_writes(bank_procs):
    db = bank_db()
    db.put("Customer", "Bob", "Bob")
    db.put("Saving", "Bob", 5)
    execute(db, procs_of(bank_procs)["Transfer"], ("Bob", 7))
    # the second read sees the buffered debit, so the balance is unchanged
    assert db.get("Current", "Bob") == 50
    assert db.get("Saving", "Bob") == 6


def test_abort_leaves_database_untouched(bank_procs):
    db = bank_db()
    deposit = procs_of(bank_procs)["Deposit"]
    assert execute(db, deposit, ("Amy", 5, 1)).committed
    before = hex_digest(db)
    res = execute(db, deposit, ("Amy", 5, 1))  # duplicate history reference
    assert not res.committed
    assert "already exists" in res.error
    assert hex_digest(db) == before


def test_arithmetic_on_null_aborts(bank_procs):
    db = bank_db()
    res = execute(db, procs_of(bank_procs)["Deposit"], ("Zed", 5, 1))
    assert not res.committed  # curVal is null: null + amount
    assert db.get("Current", "Zed") is None


def test_arity_mismatch_aborts(bank_procs):
    res = execute(bank_db(), procs_of(bank_procs)["Transfer"], ("Amy",))
    assert not res.committed and "expects 2" in res.error


def test_unknown_procedure_aborts(bank_procs):
    with Runtime(bank_db(), procs_of(bank_procs)) as rt:
        committed, aborted = rt.run([TxnRequest("Nope", ())])
    assert committed == [] and len(aborted) == 1


def test_single_worker_commits_in_submission_order(bank_procs):
    seen = []
    db = bank_db()
    reqs = [TxnRequest("Transfer", ("Amy", 1)), TxnRequest("Deposit", ("Bob", 1, 9)),
            TxnRequest("Deposit", ("Bob", 1, 9)), TxnRequest("Transfer", ("Amy", 2))]
    committed, aborted = run_workload(db, bank_procs, reqs, 1, lambda r, q: seen.append((r.commit_seq, q)))
    assert [r.commit_seq for r in committed] == [1, 2, 3]
    assert [q for _, q in seen] == [reqs[0], reqs[1], reqs[3]]
    assert len(aborted) == 1


def test_disjoint_keys_match_serial(bank_procs):
    reqs = [TxnRequest("Deposit", (f"a{i}", i, i)) for i in range(400)]

    def fresh():
        db = bank_db()
        for i in range(400):
            db.put("Current", f"a{i}", 0)
        return db

    serial, parallel = fresh(), fresh()
    run_workload(serial, bank_procs, reqs, 1)
    run_workload(parallel, bank_procs, reqs, 8)
    assert hex_digest(serial) == hex_digest(parallel)


def contended_run(workload, seed, workers, n=300, keys=8):
    wl = make_workload(workload, seed)
    db = wl.create_database(keys, random.Random(seed))
    initial = db.copy()
    reqs = wl.requests(n, keys, random.Random(seed + 1))
    log = []
    with Runtime(db, wl.registry, workers, lambda r, q: log.append(q)) as rt:
        committed, aborted = rt.run(reqs)
    return wl, initial, db, committed, aborted, log, rt


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["bank", "smallbank", "random"]))
def test_commit_order_is_a_serial_order(seed, workload):
    wl, initial, db, committed, aborted, log, _ = contended_run(workload, seed, 4)
    assert [r.commit_seq for r in committed] == list(range(1, len(committed) + 1))
    assert len(committed) + len(aborted) == 300
    # replaying the committed requests serially in commit order reproduces the state
    replayed = serial_replay(initial, wl.registry, log)
    assert replayed == log
    assert hex_digest(initial) == hex_digest(db)


def test_transfers_conserve_money():
    wl = make_workload("bank", 3)
    keys = 6
    db = wl.create_database(keys, random.Random(3))
    total = sum(db.tables["Current"].values())
    reqs = [r for r in wl.requests(2_000, keys, random.Random(4)) if r.proc == "Transfer"]
    with Runtime(db, wl.registry, 8) as rt:
        committed, _ = rt.run(reqs)
    assert sum(db.tables["Current"].values()) == total
    paying = sum(1 for r in committed if r.write_set)
    assert sum(db.tables["Saving"].values()) == paying
    assert rt.locks.held() == 0


def test_contention_causes_restarts_not_lost_updates():
    wl, initial, db, committed, _, log, rt = contended_run("bank", 11, 8, n=2_000, keys=2)
    serial_replay(initial, wl.registry, log)
    assert hex_digest(initial) == hex_digest(db)
    assert rt.locks.held() == 0


def test_wait_die_younger_dies():
    lm = LockManager()
    assert lm.acquire(1, ("T", 1), EXCLUSIVE)
    with pytest.raises(_Die):
        lm.acquire(2, ("T", 1), SHARED)
    assert lm.held() == 1


def test_wait_die_older_waits():
    lm = LockManager()
    lm.acquire(2, ("T", 1), EXCLUSIVE)
    got = threading.Event()

    def older():
        lm.acquire(1, ("T", 1), EXCLUSIVE)
        got.set()

    t = threading.Thread(target=older)
    t.start()
    assert not got.wait(0.05)
    lm.release_all(2, [("T", 1)])
    assert got.wait(2)
    t.join()
    lm.release_all(1, [("T", 1)])
    assert lm.held() == 0


def test_shared_locks_coexist_and_upgrade():
    lm = LockManager()
    assert lm.acquire(1, ("T", 1), SHARED)
    assert lm.acquire(2, ("T", 1), SHARED)
    assert not lm.acquire(1, ("T", 1), SHARED)  # already held
    with pytest.raises(_Die):
        lm.acquire(2, ("T", 1), EXCLUSIVE)  # younger upgrade conflicts with older reader
    lm.release_all(2, [("T", 1)])
    assert not lm.acquire(1, ("T", 1), EXCLUSIVE)  # upgrade, not a new grant
    assert lm.held() == 1


def test_runtime_rejects_zero_workers(bank_procs):
    with pytest.raises(ValueError):
        Runtime(bank_db(), procs_of(bank_procs), 0)


def test_hot_keys_make_progress_at_default_switch_interval():
    # regression: victims used to re-take shared locks faster than the older
    # waiter could wake up, starving it forever
    import sys

    old = sys.getswitchinterval()
    sys.setswitchinterval(0.005)
    try:
        wl, initial, db, committed, aborted, log, rt = contended_run("bank", 11, 8, n=2_000, keys=2)
    finally:
        sys.setswitchinterval(old)
    assert len(committed) + len(aborted) == 2_000
    serial_replay(initial, wl.registry, log)
    assert hex_digest(initial) == hex_digest(db)


def test_wait_released_returns_after_release():
    lm = LockManager()
    lm.acquire(1, ("T", 1), SHARED)
    done = threading.Event()
    t = threading.Thread(target=lambda: (lm.wait_released(("T", 1), 1), done.set()))
    t.start()
    assert not done.wait(0.05)
    lm.release_all(1, [("T", 1)])
    assert done.wait(2)
    t.join()
    lm.wait_released(("T", 1), 1)  # not held: returns at once
