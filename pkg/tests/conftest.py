import os
import shutil
import tempfile

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("suite", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")


@pytest.fixture
def workdir():
    d = tempfile.mkdtemp(prefix="pf-test-")
    yield d
    shutil.rmtree(d, ignore_errors=True)


@pytest.fixture
def kernels():
    """Collects kernels and shuts each one down after the test."""
    made = []
    yield made
    for k in made:
        k.shutdown()


@pytest.fixture
def local_dfk(kernels):
    from pilotflow import DataFlowKernel, LocalExecutor
    dfk = DataFlowKernel([LocalExecutor(workers=4)], seed=1)
    kernels.append(dfk)
    return dfk


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(name, ok, detail)`` records one acceptance line and returns ``ok``."""
    def record(name, ok, detail=""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
