"""``pacman`` command-line interface.

Exit status: 0 on success, 2 when ``verify`` finds differing digests (or a
``bench`` row fails its digest check), 1 on any other error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .analysis import analyze, dumps_graph, export_dot
from .bench import BenchConfig, bench_matrix, rows_to_csv, rows_to_table, run_to_directory
from .durability import COMMAND, LOGICAL
from .errors import PacmanError
from .ir import ProcedureSyntaxError, load_procedures
from .recovery import CLR_P, SCHEMES, RecoveryReport, recover_directory
from .workloads import WORKLOADS

DEFAULT_DATA_DIR = "pacman-data"


class CliError(Exception):
    pass


def data_dir(explicit: str | None) -> Path:
    """--out wins, then $PACMAN_DATA_DIR, then ./pacman-data."""
    if explicit:
        return Path(explicit)
    return Path(os.environ.get("PACMAN_DATA_DIR") or DEFAULT_DATA_DIR)


def on_off(text: str) -> bool:
    if text in ("on", "true", "1", "yes"):
        return True
    if text in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError("expected on or off")


def int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("expected positive integers")
    return values


def _add_workload_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workload", choices=WORKLOADS, default="bank")
    p.add_argument("--txns", type=int, default=10_000, help="number of requests")
    p.add_argument("--keys", type=int, default=1_000, help="key-space size")
    p.add_argument("--workers", type=int, default=1, help="worker threads")
    p.add_argument("--epoch-ms", type=float, default=10.0, help="wall-clock epoch length")
    p.add_argument("--epoch-txns", type=int, default=None,
                   help="deterministic epochs of this many requests (overrides --epoch-ms)")
    p.add_argument("--batch-epochs", type=int, default=100, help="epochs per log batch")
    p.add_argument("--adhoc-pct", type=float, default=0.0, help="percent of ad-hoc transactions")
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="EPOCHS",
                   help="checkpoint period in epochs (0: initial checkpoint only)")
    p.add_argument("--crash-epoch", type=int, default=None, help="simulate a crash in this epoch")
    p.add_argument("--lanes", type=int, default=2, help="logger lanes")
    p.add_argument("--seed", type=int, default=0)


def _config(args, **overrides) -> BenchConfig:
    cfg = BenchConfig(
        workload=args.workload,
        txn_count=args.txns,
        key_count=args.keys,
        worker_count=args.workers,
        epoch_ms=args.epoch_ms,
        epoch_txns=args.epoch_txns,
        batch_epochs=args.batch_epochs,
        adhoc_pct=args.adhoc_pct,
        checkpoint_every_epochs=args.checkpoint_every,
        seed=args.seed,
        crash_epoch=args.crash_epoch,
        lanes=args.lanes,
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pacman", description="Command logging with parallel, dependency-driven recovery."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="decompose procedures and write dependency graphs")
    p.add_argument("proc_dir", help="directory of .proc files")
    p.add_argument("--out", help="output directory (default: the data directory)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("run", help="run a workload with logging, optionally crashing")
    _add_workload_flags(p)
    p.add_argument("--log-mode", choices=(COMMAND, LOGICAL), default=COMMAND)
    p.add_argument("--out", help="data directory")
    p.add_argument("--force", action="store_true", help="replace an existing run in --out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("recover", help="recover a data directory and print the report")
    p.add_argument("data_dir", nargs="?", help="data directory (default: --out / $PACMAN_DATA_DIR)")
    p.add_argument("--out", help="data directory")
    p.add_argument("--scheme", choices=SCHEMES, default=CLR_P)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--pipeline", type=on_off, default=True, metavar="on|off")
    p.add_argument("--no-fine", dest="fine", action="store_false",
                   help="disable key-space dispatch inside piece-sets")
    p.add_argument("--last-writer-wins", action="store_true", help="llr-p: keep only final writes")
    p.add_argument("--report", help="also write the report JSON here")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("verify", help="compare the digests of two recovery reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="recovery time matrix by scheme and worker count")
    _add_workload_flags(p)
    p.add_argument("--scheme", default=",".join(SCHEMES),
                   help=f"comma-separated subset of {','.join(SCHEMES)}")
    p.add_argument("--bench-workers", type=int_list, default=[1, 2, 4], metavar="N,N,...",
                   help="recovery worker counts")
    p.add_argument("--pipeline", default="on,off", help="on, off or on,off")
    p.add_argument("--no-fine", dest="fine", action="store_false")
    p.add_argument("--out", help="scratch data directory")
    p.add_argument("--csv", help="write the CSV here (default: stdout after the table)")
    p.set_defaults(func=cmd_bench)
    return parser


def cmd_analyze(args) -> int:
    proc_dir = Path(args.proc_dir)
    if not proc_dir.is_dir():
        raise CliError(f"{proc_dir} is not a directory")
    paths = sorted(proc_dir.glob("*.proc"))
    if not paths:
        raise CliError(f"no procedures: {proc_dir} has no .proc files")
    procs = load_procedures(paths)
    ldgs, gdg = analyze(procs)
    out = data_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for g in ldgs:
        (out / f"local.{g.proc}.dot").write_text(export_dot(g, g.proc), encoding="utf-8")
    (out / "global.dot").write_text(export_dot(gdg, "global"), encoding="utf-8")
    (out / "global.json").write_text(dumps_graph(gdg), encoding="utf-8")
    print(f"{len(procs)} procedures, {sum(len(g.slices) for g in ldgs)} slices, "
          f"{len(gdg.blocks)} blocks, {len(gdg.edges)} block edges -> {out}")
    return 0


def cmd_run(args) -> int:
    out = data_dir(args.out)
    record = run_to_directory(_config(args, log_mode=args.log_mode), out, force=args.force)
    summary = {
        "data_dir": str(out),
        "committed": record.committed,
        "aborted": record.aborted,
        "epochs": record.epochs,
        "crashed": record.crashed,
        "pepoch": record.pepoch,
        "checkpoints": record.checkpoints,
        "log_bytes_cl": record.log_bytes_cl,
        "log_bytes_ll": record.log_bytes_ll,
        "persisted_digest": record.persisted_digest(),
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_recover(args) -> int:
    directory = data_dir(args.data_dir or args.out)
    report, _ = recover_directory(
        directory, args.scheme, args.workers, args.pipeline, args.fine,
        last_writer_wins=args.last_writer_wins,
    )
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_verify(args) -> int:
    try:
        a = RecoveryReport.load(args.report_a)
        b = RecoveryReport.load(args.report_b)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"unreadable report: {exc}") from None
    if a.digest == b.digest:
        print(f"PASS digest {a.digest}")
        return 0
    print(f"FAIL {args.report_a}: {a.digest}")
    print(f"FAIL {args.report_b}: {b.digest}")
    return 2


def cmd_bench(args) -> int:
    schemes = [s for s in args.scheme.split(",") if s]
    for s in schemes:
        if s not in SCHEMES:
            raise CliError(f"unknown scheme {s!r}")
    pipelines = [on_off(x) for x in args.pipeline.split(",") if x]
    rows = bench_matrix(_config(args), data_dir(args.out), schemes, args.bench_workers, pipelines,
                        args.fine)
    sys.stdout.write(rows_to_table(rows))
    csv_text = rows_to_csv(rows)
    if args.csv:
        Path(args.csv).write_text(csv_text, encoding="utf-8")
    else:
        sys.stdout.write("\n" + csv_text)
    return 0 if all(r.digest_ok for r in rows) else 2


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, PacmanError, ProcedureSyntaxError, ValueError, OSError) as exc:
        print(f"pacman {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
