from __future__ import annotations

import random

from ..storage import Database
from ..txn import TxnRequest
from .base import Workload

# standard Smallbank mix, percent
MIX = (
    ("Amalgamate", 15),
    ("Balance", 15),
    ("DepositChecking", 15),
    ("SendPayment", 25),
    ("TransactSavings", 15),
    ("WriteCheck", 15),
)


def customer(i: int) -> str:
    return f"cust{i:06d}"


class SmallbankWorkload(Workload):
    def __init__(self):
        from . import fixture_sources

        super().__init__("smallbank", fixture_sources("smallbank"))
        self._names = [p for p, _ in MIX]
        self._weights = [w for _, w in MIX]

    def populate(self, db: Database, keys: int, rng: random.Random) -> None:
        for i in range(keys):
            db.put("Accounts", customer(i), i)
            db.put("Savings", i, rng.randint(100, 10000))
            db.put("Checking", i, rng.randint(100, 10000))

    def _name(self, keys, rng):
        # a few lookups miss, exercising guard-false paths and null-key aborts
        return customer(rng.randrange(keys + keys // 50 + 1))

    def request(self, keys: int, rng: random.Random) -> TxnRequest:
        proc = rng.choices(self._names, self._weights)[0]
        if proc == "Balance":
            args = (self._name(keys, rng),)
        elif proc in ("Amalgamate",):
            args = (self._name(keys, rng), self._name(keys, rng))
        elif proc == "SendPayment":
            args = (self._name(keys, rng), self._name(keys, rng), rng.randint(1, 100))
        else:
            args = (self._name(keys, rng), rng.randint(1, 100))
        return TxnRequest(proc, args)
