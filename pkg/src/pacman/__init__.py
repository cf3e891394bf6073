"""Main-memory table store with command logging and parallel recovery.

Typical flow: parse stored procedures (:mod:`pacman.ir`), decompose them
into slices and blocks (:mod:`pacman.analysis`), execute requests with
group-commit logging (:mod:`pacman.txn`, :mod:`pacman.durability`), and
after a crash replay the log in parallel (:mod:`pacman.recovery`).
"""

__version__ = "0.1.0"

from .analysis import (
    GlobalDependencyGraph,
    LocalDependencyGraph,
    analyze,
    build_global_graph,
    build_local_graph,
    export_dot,
)
from .ir import ProcedureIR, extract_data_deps, extract_flow_deps, parse_procedure, parse_procedures
from .storage import Database, restore, snapshot, state_digest

__all__ = [
    "Database",
    "GlobalDependencyGraph",
    "LocalDependencyGraph",
    "ProcedureIR",
    "analyze",
    "build_global_graph",
    "build_local_graph",
    "export_dot",
    "extract_data_deps",
    "extract_flow_deps",
    "parse_procedure",
    "parse_procedures",
    "restore",
    "snapshot",
    "state_digest",
]
