import random
import sys

import pytest

from pacman.analysis import analyze
from pacman.workloads import fixture_procedures

# GIL switches every 5 ms by default; a short interval makes thread
# interleavings (and therefore lock conflicts) actually happen in tests.
sys.setswitchinterval(1e-5)


@pytest.fixture(scope="session")
def bank_procs():
    procs = {p.name: p for p in fixture_procedures("bank")}
    # Transfer first, so its slices get the smallest ids
    return [procs["Transfer"], procs["Deposit"]]


@pytest.fixture(scope="session")
def bank_graphs(bank_procs):
    return analyze(bank_procs)


@pytest.fixture(scope="session")
def bank_gdg(bank_graphs):
    return bank_graphs[1]


@pytest.fixture
def rng():
    return random.Random(1234)
