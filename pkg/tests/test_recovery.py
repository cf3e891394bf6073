import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from pacman.analysis import analyze
from pacman.durability import AdHoc, Command, LogBatch, LogEntry
from pacman.errors import LogModeError, ReplayDivergence, UnrecoverableLogError
from pacman.ir import parse_procedure
from pacman.recovery import (
    CLR, CLR_P, LLR_P, PIPELINED, SYNCHRONOUS, CoreAssignment, RecoveryReport, ReplayEngine,
    assign_workers, dispatch_fine, estimate_assignment, execute_coarse, generate_schedule,
    generate_schedules, recover_llr_p, recover_pipelined, recover_serial,
)
from pacman.recovery.dispatch import build_templates, plan_units, slot_hash
from pacman.storage import TOMBSTONE, Database, hex_digest
from pacman.txn import LockManager
from pacman.workloads import make_workload


def bank_db():
    db = Database(["Customer", "Current", "Saving", "History"])
    for name, payee in (("Amy", "Bob"), ("Bob", "Amy"), ("Cat", "Amy")):
        db.put("Customer", name, payee)
        db.put("Current", name, 100)
        db.put("Saving", name, 0)
    return db


def batch(*bodies, batch_id=0, start=1):
    return LogBatch(batch_id, tuple(LogEntry(start + i, 1, b) for i, b in enumerate(bodies)))


T = lambda src, amt: Command("Transfer", (src, amt))
D = lambda name, amt, ref: Command("Deposit", (name, amt, ref))


def clr(db, batches, procs):
    recover_serial(batches, db, procs)
    return hex_digest(db)


def test_schedule_example(bank_gdg):
    sched = generate_schedule(batch(T("Amy", 10), D("Bob", 5, 1), T("Bob", 3)), bank_gdg)
    sets = {b: [(p.ordinal, p.proc) for p in ps.pieces] for b, ps in sched.piece_sets.items()}
    assert sets == {
        0: [(0, "Transfer"), (2, "Transfer")],
        1: [(0, "Transfer"), (1, "Deposit"), (2, "Transfer")],
        2: [(0, "Transfer"), (1, "Deposit"), (2, "Transfer")],
        3: [(1, "Deposit")],
        4: [],  # catch-all for ad-hoc rows of unknown tables
    }
    assert sched.edges == bank_gdg.edges
    assert sched.predecessors(2) == [0, 1]
    assert sched.txns == 3
    # pieces of one transaction share their bindings
    p0 = [ps.pieces[0] for ps in sched.piece_sets.values() if ps.pieces and ps.pieces[0].ordinal == 0]
    assert len({id(p.env) for p in p0}) == 1


def test_empty_batch_schedule(bank_gdg):
    sched = generate_schedule(LogBatch(3, ()), bank_gdg)
    assert sched.txns == 0 and sched.nonempty() == {}


def test_single_slice_procedure_schedule():
    ir = parse_procedure("proc P(k) { a = read(T, k); write(T, k, a + 1); }")
    _, gdg = analyze([ir])
    sched = generate_schedule(batch(Command("P", (1,)), Command("P", (2,))), gdg)
    assert [len(ps) for ps in sched.piece_sets.values()] == [2, 0]


def test_unknown_procedure_is_unrecoverable(bank_gdg, bank_procs):
    with pytest.raises(UnrecoverableLogError):
        generate_schedules(batch(Command("Nope", ())), bank_gdg)
    db = bank_db()
    with pytest.raises(UnrecoverableLogError):
        recover_serial([batch(Command("Nope", ()))], db, bank_procs)
    assert db.row_count() == 0
    db = bank_db()
    with pytest.raises(UnrecoverableLogError):
        recover_pipelined([batch(T("Amy", 1)), batch(Command("Nope", ()), batch_id=1, start=2)],
                          bank_gdg, db, workers=2)
    assert db.row_count() == 0


def test_bad_arity_is_unrecoverable(bank_gdg):
    with pytest.raises(UnrecoverableLogError):
        generate_schedules(batch(Command("Transfer", ("Amy",))), bank_gdg)


def test_adhoc_rows_go_to_owning_blocks(bank_gdg):
    writes = (("Current", "Amy", 1), ("Saving", "Amy", 2), ("Other", 1, 3))
    sched = generate_schedule(batch(T("Amy", 1), AdHoc(writes), T("Bob", 1)), bank_gdg)
    adhoc = {b: p.writes for b, ps in sched.piece_sets.items() for p in ps.pieces if p.proc is None}
    assert adhoc == {1: (writes[0],), 2: (writes[1],), 4: (writes[2],)}
    ordinals = [p.ordinal for p in sched.piece_sets[1].pieces]
    assert ordinals == [0, 1, 2]


def test_adhoc_on_shared_read_table_cuts_batch():
    a = parse_procedure("proc A(k) { x = read(Cfg, 0); write(U, k, x); }")
    b = parse_procedure("proc B(k) { y = read(Cfg, 1); write(V, k, y); }")
    _, gdg = analyze([a, b])
    assert len(gdg.table_blocks["Cfg"]) > 1
    entries = batch(Command("A", (1,)), AdHoc((("Cfg", 0, 9),)), Command("B", (2,)))
    scheds = generate_schedules(entries, gdg)
    assert [s.txns for s in scheds] == [1, 1, 1]
    with pytest.raises(ValueError):
        generate_schedule(entries, gdg)
    db = Database(["Cfg", "U", "V"])
    db.put("Cfg", 0, 5)
    db.put("Cfg", 1, 6)
    oracle = db.copy()
    recover_serial([entries], oracle, [a, b])
    recover_pipelined([entries], gdg, db, workers=4)
    assert hex_digest(db) == hex_digest(oracle)
    assert db.get("U", 1) == 5 and db.get("V", 2) == 6 and db.get("Cfg", 0) == 9


def test_core_assignment_examples():
    assert assign_workers([20, 40, 20, 20], 10).workers == {0: 2, 1: 4, 2: 2, 3: 2}
    assert assign_workers([1, 0, 0], 3).workers == {0: 1, 1: 1, 2: 1}
    assert assign_workers([100, 1], 4).workers == {0: 3, 1: 1}
    multi = assign_workers([5, 5, 5], 2)
    assert multi.multiplexed and multi.worker_ids() == {0: (0,), 1: (1,), 2: (0,)}


@settings(max_examples=200)
@given(st.lists(st.integers(0, 1000), min_size=1, max_size=12), st.integers(1, 32))
def test_core_assignment_properties(counts, pool):
    a = assign_workers(counts, pool)
    if pool < len(counts):
        assert a.multiplexed
        return
    assert sum(a.workers.values()) == pool
    assert min(a.workers.values()) >= 1
    ids = [w for ws in a.worker_ids().values() for w in ws]
    assert sorted(ids) == list(range(pool))


def test_estimate_assignment_counts_pieces(bank_gdg):
    b = batch(T("Amy", 1), T("Bob", 1), D("Cat", 1, 1), AdHoc((("History", 5, 1),)))
    a = estimate_assignment([b], bank_gdg, 10)
    # piece counts 2, 3, 3, 2 -> quotas 2, 3, 3, 2
    assert a.workers == {0: 2, 1: 3, 2: 3, 3: 2}


def test_notifications_equal_scheduled_edges(bank_gdg, bank_procs):
    b = batch(T("Amy", 10), D("Bob", 5, 1), T("Bob", 3))
    db = bank_db()
    report = recover_pipelined([b], bank_gdg, db, workers=4)
    assert report.extras["notifications"] == len(bank_gdg.edges)
    assert report.extras["piece_sets"] == len(bank_gdg.blocks) + 1
    assert hex_digest(db) == clr(bank_db(), [b], bank_procs)


def test_execute_coarse_respects_block_order(bank_gdg, bank_procs):
    b = batch(T("Amy", 10), D("Bob", 5, 1), T("Bob", 3), T("Cat", 7))
    sched = generate_schedule(b, bank_gdg)
    events = []
    lock = threading.Lock()

    import pacman.recovery.engine as engine_mod
    original = engine_mod.run_piece_set

    def traced(tables, pieces):
        with lock:
            events.append(("start", pieces[0].block if pieces else None))
        original(tables, pieces)
        with lock:
            events.append(("end", pieces[0].block if pieces else None))

    engine_mod.run_piece_set = traced
    try:
        db = bank_db()
        execute_coarse(sched, db, assign_workers([1, 1, 1, 1], 4), bank_gdg)
    finally:
        engine_mod.run_piece_set = original
    pos = {e: i for i, e in enumerate(events)}
    for a, c in bank_gdg.edges:
        assert pos[("end", a)] < pos[("start", c)]
    assert hex_digest(db) == clr(bank_db(), [b], bank_procs)


def test_single_block_graph_matches_serial():
    ir = parse_procedure("proc P(k, v) { a = read(T, k); write(T, k, a + v); }")
    _, gdg = analyze([ir])
    rnd = random.Random(2)
    b = batch(*[Command("P", (rnd.randrange(5), rnd.randrange(9))) for _ in range(200)])
    base = Database(["T"])
    for k in range(5):
        base.put("T", k, 0)
    a, c = base.copy(), base.copy()
    recover_serial([b], a, [ir])
    recover_pipelined([b], gdg, c, workers=4)
    assert hex_digest(a) == hex_digest(c)


def pick_two_lane_names(lanes=2):
    names = [f"n{i}" for i in range(50)]
    first = names[0]
    other = next(n for n in names if slot_hash("Current", n) % lanes != slot_hash("Current", first) % lanes)
    return first, other


def test_dispatch_fine_splits_independent_rows(bank_gdg):
    x, y = pick_two_lane_names()
    sched = generate_schedule(batch(D(x, 1, 1), D(y, 2, 2), D(x, 3, 3)), bank_gdg)
    plan = dispatch_fine(sched.piece_sets[1].pieces, 2, build_templates(bank_gdg))
    lane_x = slot_hash("Current", x) % 2
    assert [[p.ordinal for p, _ in tasks] for tasks in plan] == (
        [[0, 2], [1]] if lane_x == 0 else [[1], [0, 2]]
    )


def test_dispatch_fine_glues_transfer_rows(bank_gdg):
    x, y = pick_two_lane_names()
    sched = generate_schedule(batch(T(x, 10), D(y, 1, 1)), bank_gdg)
    pieces = sched.piece_sets[1].pieces
    pieces[0].env["dst"] = y  # delivered by the upstream Customer lookup
    units = plan_units(pieces, 2, build_templates(bank_gdg))
    # the transfer's credit to y and the deposit on y share a row, so one lane
    lanes = {tuple(u.slots): u.lane for u in units}
    assert lanes[(("Current", y), ("Current", y))] == lanes[(("Current", y), ("Current", y))]
    credit = next(u for u in units if u.piece is pieces[0] and u.slots[0] == ("Current", y))
    deposit = next(u for u in units if u.piece is pieces[1])
    assert credit.lane == deposit.lane


def test_dispatch_single_hot_key_uses_one_lane(bank_gdg):
    sched = generate_schedule(batch(*[D("Amy", i, i) for i in range(10)]), bank_gdg)
    plan = dispatch_fine(sched.piece_sets[1].pieces, 4, build_templates(bank_gdg))
    assert sum(1 for tasks in plan if tasks) == 1


def test_dispatch_falls_back_when_keys_unknown():
    ir = parse_procedure("proc P(k) { a = read(T, k); write(T, a, 1); }")
    _, gdg = analyze([ir])
    sched = generate_schedule(batch(Command("P", (1,))), gdg)
    assert dispatch_fine(sched.piece_sets[0].pieces, 2, build_templates(gdg)) is None


def test_pipelined_mode_overlaps_batches(bank_gdg):
    def run(mode):
        released = threading.Event()
        outcome = {}

        def on_start(batch_id, segment, block):
            if batch_id == 1:
                released.set()
            if (batch_id, block) == (0, 3):
                outcome["overlap"] = released.wait(0.5 if mode == SYNCHRONOUS else 10)

        batches = [batch(D("Amy", 1, 10 + i), batch_id=i, start=1 + i) for i in range(3)]
        engine = ReplayEngine(bank_gdg, workers=4, mode=mode, fine=False, on_start=on_start)
        engine.run(bank_db(), batches)
        return outcome["overlap"]

    assert run(PIPELINED) is True
    assert run(SYNCHRONOUS) is False


def test_modes_agree_on_one_batch(bank_gdg, bank_procs):
    b = batch(T("Amy", 10), D("Bob", 5, 1), T("Bob", 3), D("Cat", 1, 2))
    digests = set()
    for mode in (PIPELINED, SYNCHRONOUS):
        db = bank_db()
        recover_pipelined([b], bank_gdg, db, workers=2, mode=mode)
        digests.add(hex_digest(db))
    assert digests == {clr(bank_db(), [b], bank_procs)}


class TracingRows(dict):
    log = None

    def __setitem__(self, key, value):
        self.log.append((self.name, key, value))
        super().__setitem__(key, value)

    def __delitem__(self, key):
        self.log.append((self.name, key, TOMBSTONE))
        super().__delitem__(key)

    def pop(self, key, *default):
        if key in self:
            self.log.append((self.name, key, TOMBSTONE))
        return super().pop(key, *default)


def traced(db):
    log = []
    for name, rows in list(db.tables.items()):
        t = TracingRows(rows)
        t.name, t.log = name, log
        db.tables[name] = t
    return log


def per_row(log):
    out = {}
    for table, key, value in log:
        out.setdefault((table, key), []).append(value)
    return out


def workload_batches(name, seed, n=400, keys=20, adhoc=30, per_batch=100):
    wl = make_workload(name, seed)
    db = wl.create_database(keys, random.Random(seed))
    reqs = wl.requests(n, keys, random.Random(seed + 1), adhoc)
    from pacman.txn import Runtime
    entries = []

    def on_commit(result, req):
        body = AdHoc(tuple(result.write_set)) if req.adhoc else Command(req.proc, req.args)
        entries.append(LogEntry(result.commit_seq, 1, body))

    initial = db.copy()
    with Runtime(db, wl.registry, 1, on_commit) as rt:
        rt.run(reqs)
    batches = [LogBatch(i, tuple(entries[j:j + per_batch]))
               for i, j in enumerate(range(0, len(entries), per_batch))]
    return wl, initial, db, batches


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["bank", "smallbank", "random"]),
       st.sampled_from([1, 2, 4, 8]))
def test_row_write_order_matches_serial(seed, workload, workers):
    wl, initial, final, batches = workload_batches(workload, seed)
    _, gdg = analyze(wl.procedures)
    serial_db, par_db = initial.copy(), initial.copy()
    serial_log, par_log = traced(serial_db), traced(par_db)
    recover_serial(batches, serial_db, wl.registry)
    recover_pipelined(batches, gdg, par_db, workers=workers)
    assert per_row(par_log) == per_row(serial_log)
    assert hex_digest(par_db) == hex_digest(serial_db) == hex_digest(final)


def test_replay_takes_no_locks(bank_gdg, monkeypatch):
    wl, initial, final, batches = workload_batches("bank", 1)

    def forbidden(*a, **k):
        raise AssertionError("replay must not lock")

    monkeypatch.setattr(LockManager, "acquire", forbidden)
    monkeypatch.setattr(Database, "put", forbidden)
    monkeypatch.setattr(Database, "get", forbidden)
    db = initial.copy()
    _, gdg = analyze(wl.procedures)
    recover_pipelined(batches, gdg, db, workers=4)
    assert hex_digest(db) == hex_digest(final)


def test_all_adhoc_clr_p_matches_llr_p():
    wl, initial, final, batches = workload_batches("smallbank", 3, adhoc=100)
    _, gdg = analyze(wl.procedures)
    a, b, c = initial.copy(), initial.copy(), initial.copy()
    recover_pipelined(batches, gdg, a, workers=4)
    recover_llr_p(batches, b, workers=4)
    recover_llr_p(batches, c, workers=3, last_writer_wins=True)
    assert hex_digest(a) == hex_digest(b) == hex_digest(c) == hex_digest(final)


def test_llr_p_examples():
    b = batch(AdHoc((("T", 1, "a"),)), AdHoc((("T", 1, "b"), ("T", 2, 5))), AdHoc((("T", 2, TOMBSTONE),)))
    for workers in (1, 2, 4):
        db = Database(["T"])
        recover_llr_p([b], db, workers)
        assert db.tables["T"] == {1: "b"}


def test_llr_p_rejects_command_log(bank_procs):
    db = bank_db()
    with pytest.raises(LogModeError, match="logical"):
        recover_llr_p([batch(T("Amy", 1))], db, 2)
    assert db.row_count() == 0


def test_serial_examples(bank_procs):
    db = bank_db()
    recover_serial([batch(T("Amy", 10), D("Bob", 5, 1), T("Bob", 3))], db, bank_procs)
    assert db.get("Current", "Amy") == 93
    assert db.get("Current", "Bob") == 112  # +10 from Amy, +5 deposit, -3 to Amy
    assert db.get("Saving", "Amy") == 1
    assert db.get("Saving", "Bob") == 2
    assert db.get("History", 1) == 5


def test_empty_log_keeps_checkpoint(bank_gdg, bank_procs):
    for run in (
        lambda db: recover_serial([], db, bank_procs),
        lambda db: recover_pipelined([], bank_gdg, db, 4),
        lambda db: recover_llr_p([], db, 4),
    ):
        db = bank_db()
        report = run(db)
        assert report.txns == 0 and report.digest == hex_digest(bank_db())


def test_divergence_clears_database(bank_gdg):
    # the same history reference twice cannot have committed
    b = batch(D("Amy", 1, 7), D("Bob", 1, 7))
    for workers in (1, 4):
        db = bank_db()
        with pytest.raises(ReplayDivergence):
            recover_pipelined([b], bank_gdg, db, workers)
        assert db.row_count() == 0


def test_report_round_trip(tmp_path, bank_gdg):
    report = recover_pipelined([batch(T("Amy", 1))], bank_gdg, bank_db(), workers=2)
    path = tmp_path / "r.json"
    path.write_text(report.to_json())
    back = RecoveryReport.load(path)
    assert back.digest == report.digest and back.extras["notifications"] == 4
    assert back.to_json() == report.to_json()


def test_fine_dispatch_with_every_guard_false_completes(bank_gdg, bank_procs):
    # regression: a piece-set whose ops are all skipped by guards known at
    # dispatch produced no lane tasks, so the block never signalled completion
    b = batch(T("Dan", 1), T("Eve", 2), batch_id=0)
    follow = batch(D("Amy", 1, 1), batch_id=1, start=3)
    result = {}

    def target():
        db = bank_db()
        recover_pipelined([b, follow], bank_gdg, db, workers=8)
        result["digest"] = hex_digest(db)

    t = threading.Thread(target=target, daemon=True)
    t.start()
    t.join(10)
    assert not t.is_alive(), "replay hung"
    assert result["digest"] == clr(bank_db(), [b, follow], bank_procs)
