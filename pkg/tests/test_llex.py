import os
import signal
import time

import pytest

from pilotflow import DataFlowKernel, apps
from pilotflow.errors import ConfigError, LlexTimeout
from pilotflow.executors.llex import LowLatencyExecutor


def _llex(kernels, n_wait=None, **kw):
    ex = LowLatencyExecutor(**kw)
    dfk = DataFlowKernel([ex], seed=0)
    kernels.append(dfk)
    need = ex.workers if n_wait is None else n_wait
    if need:
        ex.wait_for_workers(need, 30)
    return dfk, ex


def _drained(ex, timeout=10.0):
    deadline = time.time() + timeout
    while True:
        state = ex.introspect()
        if state["task_records"] == 0 or time.time() > deadline:
            return state
        time.sleep(0.02)


def test_single_noop_leaves_no_relay_state(kernels):
    dfk, ex = _llex(kernels, workers=1)
    assert dfk.submit(apps.hello, ("World",)).result(30) == "Hello World"
    assert _drained(ex)["task_records"] == 0


def test_hundred_tasks_two_hops_each_way(kernels):
    dfk, ex = _llex(kernels, workers=4)
    futs = [dfk.submit(apps.mul, (i, 3)) for i in range(100)]
    assert [f.result(60) for f in futs] == [3 * i for i in range(100)]
    assert ex.hops == {("task", 2): 100, ("result", 2): 100}
    assert _drained(ex)["task_records"] == 0


def test_replication_surfaces_one_result(kernels):
    dfk, ex = _llex(kernels, workers=2, replication_factor=2)
    futs = [dfk.submit(apps.identity, (i,)) for i in range(20)]
    assert [f.result(30) for f in futs] == list(range(20))
    deadline = time.time() + 5
    while ex.duplicates_discarded < 20 and time.time() < deadline:
        time.sleep(0.02)
    assert ex.surfaced == 20
    assert ex.duplicates_discarded == 20


def test_dropping_worker_masked_by_replication(kernels):
    dfk, ex = _llex(kernels, workers=1, replication_factor=2)
    ex.spawn_worker(drop_frames=True, worker_id="dropper")
    ex.wait_for_workers(2, 30)
    futs = [dfk.submit(apps.identity, (i,)) for i in range(100)]
    assert [f.result(30) for f in futs] == list(range(100))
    assert ex.surfaced == 100
    assert ex.timed_retries == 0


def test_timeout_after_all_rounds(kernels):
    dfk, ex = _llex(kernels, workers=0, task_timeout=0.1, max_timed_retries=2)
    t0 = time.perf_counter()
    f = dfk.submit(apps.noop)
    with pytest.raises(LlexTimeout):
        f.result(10)
    elapsed = time.perf_counter() - t0
    assert 0.25 <= elapsed <= 0.35
    assert ex.timed_retries == 2


def test_killed_worker_recovered_by_timed_retry(kernels):
    dfk, ex = _llex(kernels, workers=0, task_timeout=1.0, max_timed_retries=1)
    victim = ex.spawn_worker(worker_id="victim")
    ex.wait_for_workers(1, 30)
    f = dfk.submit(apps.sleep_then, (0.3, "ok"))
    time.sleep(0.1)
    os.kill(victim.pid, signal.SIGKILL)
    ex.spawn_worker(worker_id="spare")
    assert f.result(10) == "ok"
    assert ex.timed_retries == 1


def test_config_validation():
    with pytest.raises(ConfigError):
        LowLatencyExecutor(replication_factor=0)
    with pytest.raises(ConfigError):
        LowLatencyExecutor(max_timed_retries=1)
