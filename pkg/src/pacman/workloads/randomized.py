"""Seed-determined random procedures and request streams.

Generated values are drawn from the same integer range as keys, so a value
read from one table can serve as a key into another, giving the generator
foreign-key style flow dependencies for free.
"""

from __future__ import annotations

import random

from ..ir import parse_procedure
from ..storage import Database
from ..txn import TxnRequest
from .base import Workload

KINDS = ("read", "write", "insert", "delete")
KIND_WEIGHTS = (45, 30, 10, 15)


def generate_source(
    rng: random.Random,
    name: str = "P",
    tables: tuple[str, ...] = ("A", "B", "C"),
    max_ops: int = 6,
    min_ops: int = 1,
    max_params: int = 3,
    allow_if: bool = True,
) -> str:
    """Source text of a random valid procedure with ``min_ops..max_ops`` operations."""
    params = [f"p{i}" for i in range(rng.randint(1, max_params))]
    n_ops = rng.randint(min_ops, max_ops)
    block = None
    if allow_if and n_ops >= 2 and rng.random() < 0.5:
        start = rng.randrange(1, n_ops)
        length = rng.randint(1, n_ops - start)
        split = start + rng.randint(0, length) if rng.random() < 0.4 else start + length
        block = (start, start + length, split)
    outer: list[str] = []
    lines = [f"proc {name}({', '.join(params)}) {{"]
    scope = outer
    branch_vars: list[str] = []
    counter = 0

    def atom(names):
        return rng.choice(params + names)

    def value(names):
        r = rng.random()
        if r < 0.15:
            return str(rng.randrange(10))
        if r < 0.35:
            return f"{atom(names)} + {rng.randint(1, 3)}"
        return atom(names)

    for i in range(n_ops):
        indent = "  "
        if block is not None:
            start, end, split = block
            if i == start:
                guard_var = atom(outer)
                if guard_var in params:
                    cond = f"{guard_var} {rng.choice(['<', '>=', '==', '!='])} {rng.randrange(10)}"
                else:
                    cond = f"{guard_var} {rng.choice(['!=', '=='])} null"
                lines.append(f"  if ({cond}) {{")
                branch_vars = []
            if i == split and start < split < end:
                lines.append("  } else {")
                branch_vars = []
            if start <= i < end:
                indent = "    "
                scope = outer + branch_vars
            elif i == end:
                lines.append("  }")
                scope = outer
        kind = rng.choices(KINDS, KIND_WEIGHTS)[0]
        table = rng.choice(tables)
        key = atom(scope if block and block[0] <= i < block[1] else outer)
        names = scope if block and block[0] <= i < block[1] else outer
        if kind == "read":
            var = f"v{counter}"
            counter += 1
            lines.append(f"{indent}{var} = read({table}, {key});")
            if block and block[0] <= i < block[1]:
                branch_vars.append(var)
            else:
                outer.append(var)
        elif kind == "delete":
            lines.append(f"{indent}delete({table}, {key});")
        else:
            lines.append(f"{indent}{kind}({table}, {key}, {value(names)});")
    if block is not None and block[1] == n_ops:
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


class RandomWorkload(Workload):
    """A handful of generated multi-slice procedures over a few tables."""

    def __init__(self, seed: int = 0):
        rng = random.Random(f"random-workload-{seed}")
        tables = tuple(f"T{i}" for i in range(rng.randint(3, 5)))
        sources = {}
        names = []
        for i in range(rng.randint(3, 5)):
            name = f"R{i}"
            text = generate_source(rng, name, tables, max_ops=8, min_ops=2)
            parse_procedure(text)  # generator invariant: always valid
            sources[f"r{i}.proc"] = text
            names.append(name)
        super().__init__("random", sources)
        self.seed = seed
        self.table_names = tables
        self._arity = {p.name: len(p.params) for p in self.procedures}
        self._names = names

    def tables(self) -> set[str]:
        return set(self.table_names)

    def populate(self, db: Database, keys: int, rng: random.Random) -> None:
        for table in self.table_names:
            for k in range(keys):
                if rng.random() < 0.8:
                    db.put(table, k, rng.randrange(keys))

    def request(self, keys: int, rng: random.Random) -> TxnRequest:
        name = rng.choice(self._names)
        return TxnRequest(name, tuple(rng.randrange(keys) for _ in range(self._arity[name])))
