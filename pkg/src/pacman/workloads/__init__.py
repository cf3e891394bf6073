"""Built-in workloads: request generators plus their procedure sources.

``bank`` is the two-procedure transfer/deposit fixture, ``smallbank`` the
six-procedure Smallbank mix, and ``random`` a seed-determined set of
generated procedures.  ``tpcc`` ships procedure sources only: it is used
for static-analysis golden files and is never executed.
"""

from __future__ import annotations

from importlib import resources

from ..ir import ProcedureIR, parse_procedures
from .base import Workload

WORKLOADS = ("bank", "smallbank", "random")
FIXTURES = ("bank", "smallbank", "tpcc")


def fixture_sources(name: str) -> dict[str, str]:
    """File name -> text of the bundled ``.proc`` files of fixture ``name``."""
    if name not in FIXTURES:
        raise ValueError(f"unknown fixture {name!r}")
    root = resources.files(__package__) / "procs" / name
    return {
        entry.name: entry.read_text(encoding="utf-8")
        for entry in sorted(root.iterdir(), key=lambda e: e.name)
        if entry.name.endswith(".proc")
    }


def fixture_procedures(name: str) -> list[ProcedureIR]:
    procs = []
    for text in fixture_sources(name).values():
        procs.extend(parse_procedures(text))
    return procs


def make_workload(name: str, seed: int = 0) -> Workload:
    if name == "bank":
        from .bank import BankWorkload

        return BankWorkload()
    if name == "smallbank":
        from .smallbank import SmallbankWorkload

        return SmallbankWorkload()
    if name == "random":
        from .randomized import RandomWorkload

        return RandomWorkload(seed)
    raise ValueError(f"unknown workload {name!r}; choose from {', '.join(WORKLOADS)}")


__all__ = ["FIXTURES", "WORKLOADS", "Workload", "fixture_procedures", "fixture_sources", "make_workload"]
