from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..ir import ProcedureIR, parse_procedures
from ..storage import Database
from ..txn import TxnRequest


@dataclass
class Workload:
    name: str
    sources: dict  # file name -> procedure source text
    procedures: list = field(default_factory=list)

    def __post_init__(self):
        if not self.procedures:
            for text in self.sources.values():
                self.procedures.extend(parse_procedures(text))

    @property
    def registry(self) -> dict[str, ProcedureIR]:
        return {p.name: p for p in self.procedures}

    def tables(self) -> set[str]:
        return {t for p in self.procedures for t in p.tables}

    def create_database(self, keys: int, rng: random.Random) -> Database:
        db = Database(sorted(self.tables()))
        self.populate(db, keys, rng)
        return db

    def populate(self, db: Database, keys: int, rng: random.Random) -> None:
        raise NotImplementedError

    def request(self, keys: int, rng: random.Random) -> TxnRequest:
        raise NotImplementedError

    def requests(self, n: int, keys: int, rng: random.Random, adhoc_pct: float = 0) -> list[TxnRequest]:
        """``n`` requests; each is tagged ad-hoc with probability ``adhoc_pct``%."""
        out = []
        for _ in range(n):
            r = self.request(keys, rng)
            if adhoc_pct and rng.random() * 100 < adhoc_pct:
                r = TxnRequest(r.proc, r.args, True)
            out.append(r)
        return out
