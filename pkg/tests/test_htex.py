import os
import signal
import time
from collections import Counter

import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from pilotflow import DataFlowKernel, apps
from pilotflow.errors import ConfigError, UnknownManager
from pilotflow.executors import ExecutorStatus
from pilotflow.executors.htex import HighThroughputExecutor
from pilotflow.executors.htex.interchange import Interchange
from pilotflow.monitoring import MemorySink, Monitor
from pilotflow.providers import LocalProvider


def _tasks(n, start=0):
    return [(i, b"") for i in range(start, start + n)]


# interchange routing state ------------------------------------------------

def test_two_managers_capacity_one_three_tasks():
    ix = Interchange(seed=1, keep_log=True)
    ix.register_manager("a", 1, now=0.0)
    ix.register_manager("b", 1, now=0.0)
    ix.enqueue(_tasks(3))
    out = ix.match(now=0.0)
    assert sorted(m for m, _ in out) == ["a", "b"]
    assert all(len(batch) == 1 for _, batch in out)
    assert len(ix.queue) == 1
    assert ix.match(now=0.0) == []


def test_batch_bounded_by_capacity_and_batch_size():
    ix = Interchange(batch_size_max=3)
    ix.register_manager("m", 5, now=0.0)
    ix.enqueue(_tasks(8))
    (mid, batch), = ix.match(now=0.0)
    assert len(batch) == 3
    out = ix.match(now=0.0)
    assert len(out[0][1]) == 2
    assert ix.managers["m"].spare == 0 and len(ix.queue) == 3


def test_no_eligible_manager_keeps_tasks_queued():
    ix = Interchange(heartbeat_threshold=1.0)
    ix.enqueue(_tasks(2))
    assert ix.match(now=0.0) == []
    ix.register_manager("stale", 4, now=0.0)
    assert ix.match(now=5.0) == []
    assert len(ix.queue) == 2


@given(caps=st.lists(st.integers(1, 6), min_size=1, max_size=5),
       ops=st.lists(st.tuples(st.sampled_from(["enq", "match", "done"]), st.integers(0, 9)),
                    max_size=40),
       seed=st.integers(0, 2**16))
def test_capacity_safety_and_exactly_once(caps, ops, seed):
    ix = Interchange(batch_size_max=4, seed=seed)
    for i, c in enumerate(caps):
        ix.register_manager(f"m{i}", c, now=0.0)
    next_id, dispatched = 0, []
    for op, k in ops:
        if op == "enq":
            ix.enqueue(_tasks(k, next_id))
            next_id += k
        elif op == "match":
            for mid, batch in ix.match(now=0.0):
                m = ix.managers[mid]
                assert len(batch) <= 4
                assert len(m.outstanding) <= m.advertised_capacity
                dispatched += [t[0] for t in batch]
        else:
            for m in ix.managers.values():
                if m.outstanding:
                    ix.on_results(m.manager_id, [(min(m.outstanding), b"")])
    assert len(dispatched) == len(set(dispatched))
    held = sum(len(m.outstanding) for m in ix.managers.values())
    assert len(dispatched) + len(ix.queue) == next_id
    assert held <= len(dispatched)


def test_single_task_matching_is_uniform():
    ix = Interchange(seed=12345)
    for m in "abcd":
        ix.register_manager(m, 1, now=0.0)
    first = Counter()
    for i in range(10_000):
        ix.enqueue([(i, b"")])
        (mid, _), = ix.match(now=0.0)
        first[mid] += 1
        ix.on_results(mid, [(i, b"")])
    counts = [first[m] for m in "abcd"]
    sigma = (10_000 * 0.25 * 0.75) ** 0.5
    assert all(abs(c - 2500) <= 3 * sigma for c in counts)
    assert chisquare(counts).pvalue > 0.01


def test_blacklisted_manager_gets_nothing():
    ix = Interchange(seed=3, keep_log=True)
    for m in ("a", "b"):
        ix.register_manager(m, 100, now=0.0)
    ix.command("BLACKLIST", "a")
    for i in range(50):
        ix.enqueue([(i, b"")])
        ix.match(now=0.0)
    assert all(mid == "b" for mid, _ in ix.dispatch_log)
    with pytest.raises(UnknownManager):
        ix.command("BLACKLIST", "zzz")


def test_loss_threshold():
    ix = Interchange(heartbeat_threshold=6.0)
    ix.register_manager("busy", 2, now=0.0)
    ix.register_manager("idle", 2, now=0.0)
    ix.enqueue(_tasks(1))
    ix.match(now=0.0)
    holder = next(m for m in ix.managers.values() if m.outstanding).manager_id
    ix.heartbeat("busy", 5.0)
    ix.heartbeat("idle", 5.0)
    assert ix.detect_manager_loss(now=10.9) == []
    lost = dict(ix.detect_manager_loss(now=11.5))
    assert lost[holder] == [0]
    other = "idle" if holder == "busy" else "busy"
    assert lost[other] == []
    assert ix.managers == {}


def test_commands():
    ix = Interchange()
    ix.register_manager("a", 2, now=0.0)
    ix.register_manager("b", 2, now=0.0)
    assert ix.command("OUTSTANDING") == {"a": 0, "b": 0}
    ix.enqueue(_tasks(1))
    ix.match(now=0.0)
    holder = [m for m, n in ix.command("OUTSTANDING").items() if n][0]
    assert ix.command("DRAIN", holder) is False
    with pytest.raises(ValueError):
        ix.command("NOPE")


def test_duplicate_results_dropped():
    ix = Interchange()
    ix.register_manager("a", 2, now=0.0)
    ix.enqueue(_tasks(1))
    ix.match(now=0.0)
    assert len(ix.on_results("a", [(0, b"x")])) == 1
    assert ix.on_results("a", [(0, b"x")]) == []
    assert ix.duplicates_dropped == 1


def test_config_validation():
    with pytest.raises(ConfigError):
        HighThroughputExecutor(heartbeat_period=2.0, heartbeat_threshold=1.0)
    with pytest.raises(ConfigError):
        HighThroughputExecutor(workers_per_node=0)


# running executor ---------------------------------------------------------

def _htex_kernel(kernels, **kw):
    sink = MemorySink()
    ex = HighThroughputExecutor(**kw)
    dfk = DataFlowKernel([ex], seed=0, monitor=Monitor([sink]))
    kernels.append(dfk)
    ex.wait_for_managers(ex.provider.init_blocks, 30)
    return dfk, ex, sink


def _running_interval(rec):
    start = [t for s, t in rec.history if s.value == "running"][-1]
    return start, rec.complete_time


def test_two_workers_run_concurrently(kernels):
    dfk, ex, sink = _htex_kernel(kernels, workers_per_node=2)
    futs = [dfk.submit(apps.sleep, (0.5,)) for _ in range(2)]
    for f in futs:
        f.result(30)
    (a0, a1), (b0, b1) = [_running_interval(dfk.tasks[f.task_id]) for f in futs]
    assert max(a0, b0) < min(a1, b1)


def test_result_batches_exactly_once(kernels):
    dfk, ex, _ = _htex_kernel(kernels, workers_per_node=2, prefetch_capacity=8,
                              keep_frame_log=True)
    futs = [dfk.submit(apps.identity, (i,)) for i in range(100)]
    assert [f.result(60) for f in futs] == list(range(100))
    ids = [eid for _, eids in ex.frame_log for eid in eids]
    assert 1 <= len(ex.frame_log) <= 100
    assert len(ids) == 100 and len(set(ids)) == 100


def test_outstanding_idle_is_all_zero(kernels):
    dfk, ex, _ = _htex_kernel(kernels)
    dfk.submit(apps.noop).result(30)
    time.sleep(0.2)
    out = ex.outstanding()
    assert out and set(out.values()) == {0}


def test_blacklist_stops_dispatch(kernels):
    dfk, ex, _ = _htex_kernel(kernels, provider=LocalProvider(init_blocks=2, max_blocks=2),
                              keep_frame_log=True)
    victim = sorted(ex.managers)[0]
    ex.blacklist(victim)
    for f in [dfk.submit(apps.noop) for _ in range(50)]:
        f.result(30)
    assert victim not in {mid for mid, _ in ex.frame_log}
    with pytest.raises(UnknownManager):
        ex.blacklist("no-such-manager")


def test_killed_manager_tasks_retried(kernels):
    provider = LocalProvider(init_blocks=1, max_blocks=2)
    ex = HighThroughputExecutor(provider=provider, workers_per_node=5,
                                heartbeat_period=0.5, heartbeat_threshold=1.5)
    dfk = DataFlowKernel([ex], seed=0, retries=1)
    kernels.append(dfk)
    ex.wait_for_managers(1, 30)
    victim = next(iter(ex.managers))
    futs = [dfk.submit(apps.sleep_then, (2.0, i)) for i in range(5)]
    deadline = time.time() + 10
    while ex.outstanding().get(victim) != 5:
        assert time.time() < deadline
        time.sleep(0.05)
    ex.scale_out(1)
    ex.wait_for_managers(2, 30)
    t0 = time.time()
    os.killpg(ex.managers[victim]["pid"], signal.SIGKILL)
    assert [f.result(ex.heartbeat_threshold + 10) for f in futs] == list(range(5))
    assert time.time() - t0 <= ex.heartbeat_threshold + 10
    assert ex.lost_managers and ex.lost_managers[0]["tasks"] == 5
    assert all(dfk.tasks[f.task_id].launches == 2 for f in futs)


def _alive(pid):
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    return True


def test_manager_exits_when_interchange_dies(kernels):
    dfk, ex, _ = _htex_kernel(kernels, heartbeat_period=0.5, heartbeat_threshold=1.5)
    pid = next(iter(ex.managers.values()))["pid"]
    assert _alive(pid)
    t0 = time.time()
    ex.interchange_proc.kill()
    while _alive(pid) and time.time() - t0 < 5:
        time.sleep(0.02)
    assert not _alive(pid)
    assert time.time() - t0 <= ex.heartbeat_threshold + ex.heartbeat_period


def test_shutdown_stops_managers(kernels):
    dfk, ex, _ = _htex_kernel(kernels, provider=LocalProvider(init_blocks=2, max_blocks=2))
    pids = [m["pid"] for m in ex.managers.values()]
    dfk.submit(apps.noop).result(30)
    dfk.shutdown()
    assert ex.status is ExecutorStatus.STOPPED
    deadline = time.time() + 5
    while any(_alive(p) for p in pids) and time.time() < deadline:
        time.sleep(0.05)
    assert not any(_alive(p) for p in pids)
