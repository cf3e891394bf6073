"""Run a logged workload, crash mid-epoch, and recover it three ways.

Run: python demos/02_crash_and_recover.py
"""

import tempfile
from pathlib import Path

from pacman.bench import BenchConfig, run_to_directory
from pacman.durability import LOGICAL
from pacman.recovery import CLR, CLR_P, LLR_P, recover_directory


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        cfg = BenchConfig(workload="smallbank", txn_count=5_000, key_count=500, worker_count=4,
                          epoch_txns=100, batch_epochs=10, checkpoint_every_epochs=20,
                          crash_epoch=37, seed=7)
        record = run_to_directory(cfg, Path(tmp, "cmd"))
        print(f"committed {record.committed}, aborted {record.aborted} before the crash")
        print(f"crashed in epoch {cfg.crash_epoch}; pepoch on disk is {record.pepoch}")
        print(f"checkpoints taken at epochs {record.checkpoints}")
        expected = record.persisted_digest()
        print(f"state as of pepoch: {expected[:16]}...\n")

        digests = set()

        def show(label, report):
            digests.add(report.digest)
            print(f"{label:<28} {report.txns} txns {report.total_ms:7.1f} ms  {report.digest[:16]}...")

        show("clr (serial)", recover_directory(Path(tmp, "cmd"), CLR)[0])
        for pipeline in (True, False):
            label = "clr-p 4 workers " + ("pipelined" if pipeline else "synchronous")
            show(label, recover_directory(Path(tmp, "cmd"), CLR_P, workers=4, pipeline=pipeline)[0])

        cfg.log_mode = LOGICAL
        run_to_directory(cfg, Path(tmp, "logical"))
        show("llr-p 4 workers (logical)", recover_directory(Path(tmp, "logical"), LLR_P, workers=4)[0])

        ok = digests == {expected}
        print("\nevery scheme rebuilt exactly the persisted state:", "yes" if ok else "NO")


if __name__ == "__main__":
    main()
