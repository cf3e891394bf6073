from __future__ import annotations

import random

from ..storage import Database
from ..txn import TxnRequest
from .base import Workload


def account(i: int) -> str:
    return f"acct{i:06d}"


class BankWorkload(Workload):
    """Transfers between registered payees plus deposits.

    About one account in ten has no registered payee, so its transfers take
    the guard-false path; deposits occasionally target unknown accounts or
    reuse a reference number, and abort.
    """

    TRANSFER_SHARE = 0.8

    def __init__(self):
        from . import fixture_sources

        super().__init__("bank", fixture_sources("bank"))
        self._next_ref = 0

    def populate(self, db: Database, keys: int, rng: random.Random) -> None:
        for i in range(keys):
            name = account(i)
            db.put("Current", name, 1000)
            db.put("Saving", name, 0)
            if rng.random() < 0.9:
                db.put("Customer", name, account(rng.randrange(keys)))

    def request(self, keys: int, rng: random.Random) -> TxnRequest:
        if rng.random() < self.TRANSFER_SHARE:
            return TxnRequest("Transfer", (account(rng.randrange(keys)), rng.randint(1, 50)))
        name = account(rng.randrange(keys + keys // 20 + 1))
        if self._next_ref and rng.random() < 0.02:
            ref = rng.randrange(self._next_ref)
        else:
            ref = self._next_ref
            self._next_ref += 1
        return TxnRequest("Deposit", (name, rng.randint(1, 100), ref))
