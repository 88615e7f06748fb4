import logging

import numpy as np
import pytest

from heritkit.geno import kinship_from_genotypes
from helpers import random_genotypes

_ACCEPTANCE = {}


@pytest.fixture
def record_acceptance():
    """Store one pass/fail line per acceptance criterion for the summary."""

    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] #{number:<2d} {title}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[k])


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR, logger="heritkit")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_kinship(rng):
    G = random_genotypes(rng, 40, 300)
    return G, kinship_from_genotypes(G)
