import logging
import os
import sys
import time

import pytest

from pilotflow import DataFlowKernel, ManagerLost, apps, shell_app
from pilotflow.errors import ConfigError
from pilotflow.executors.htex import HighThroughputExecutor
from pilotflow.executors.llex import LowLatencyExecutor
from pilotflow.providers import (BLOCK_TRANSITIONS, BlockState, LauncherSpec, LocalProvider,
                                 SimLrmProvider, render_launch)

SLEEPER = [sys.executable, "-c", "import time; time.sleep(60)"]


def _wait_state(provider, bid, states, timeout=10.0):
    deadline = time.time() + timeout
    while provider.status(bid) not in states:
        assert time.time() < deadline, provider.blocks[bid].history
        time.sleep(0.02)
    return provider.status(bid)


def _legal(history):
    states = [s for _, s in history]
    return all(b in BLOCK_TRANSITIONS[a] for a, b in zip(states, states[1:]))


def test_local_lifecycle_and_idempotent_cancel():
    p = LocalProvider(max_blocks=2)
    a, b = p.submit(SLEEPER), p.submit(SLEEPER)
    assert a != b
    assert p.status(a) is BlockState.ACTIVE
    pa, pb = p.blocks[a].procs[0].pid, p.blocks[b].procs[0].pid
    assert pa != pb
    p.cancel(a)
    p.cancel(a)
    assert _wait_state(p, a, {BlockState.DONE}) is BlockState.DONE
    assert p.status(b) is BlockState.ACTIVE
    p.cancel(b)
    _wait_state(p, b, {BlockState.DONE})
    p.cancel(b)
    p.shutdown()
    assert all(_legal(blk.history) for blk in p.blocks.values())


def test_render_launch():
    assert [lc.argv for lc in render_launch(["run"], LauncherSpec("single"), 1)] == [("run",)]
    cmds = render_launch(["run"], LauncherSpec("per_node", 2), 3)
    assert len(cmds) == 6
    assert [c.env["PILOTFLOW_AGENT_INDEX"] for c in cmds] == [str(i) for i in range(6)]
    assert [c.env["PILOTFLOW_NODE_INDEX"] for c in cmds] == ["0", "0", "1", "1", "2", "2"]
    assert render_launch(["run"], LauncherSpec("per_node", 2), 3) == cmds
    with pytest.raises(ConfigError):
        render_launch(["run"], LauncherSpec("single"), 0)
    assert LauncherSpec.parse("per_node:4") == LauncherSpec("per_node", 4)


def test_agent_index_visible_to_tasks(kernels, workdir):
    ex = LowLatencyExecutor(workers=3)
    dfk = DataFlowKernel([ex], seed=0)
    kernels.append(dfk)
    ex.wait_for_workers(3, 30)
    app = shell_app("sleep 0.5; echo $PILOTFLOW_AGENT_INDEX")
    outs = [os.path.join(workdir, f"idx{i}") for i in range(3)]
    for f in [dfk.submit(app, kwargs={"stdout": o}) for o in outs]:
        f.result(30)
    assert sorted(open(o).read().strip() for o in outs) == ["0", "1", "2"]


def test_sim_queue_delay():
    p = SimLrmProvider(queue_delay=2.0, seed=0)
    bid = p.submit(SLEEPER)
    assert p.status(bid) is BlockState.QUEUED
    _wait_state(p, bid, {BlockState.ACTIVE}, timeout=5)
    blk = p.blocks[bid]
    assert blk.active_time - blk.submit_time >= 2.0 - 0.1
    p.shutdown()


def test_sim_zero_delay_is_immediate():
    p = SimLrmProvider(queue_delay=0.0)
    bid = p.submit(SLEEPER)
    assert p.status(bid) is BlockState.ACTIVE
    p.shutdown()


def test_sim_max_active_blocks_queues():
    p = SimLrmProvider(max_active_blocks=1)
    a, b = p.submit(SLEEPER), p.submit(SLEEPER)
    assert p.status(a) is BlockState.ACTIVE and p.status(b) is BlockState.QUEUED
    p.cancel(a)
    _wait_state(p, b, {BlockState.ACTIVE})
    p.shutdown()


def test_failure_rate_one_fails_block(kernels, caplog):
    caplog.set_level(logging.WARNING)
    p = SimLrmProvider(failure_rate=1.0, init_blocks=1, max_blocks=1, seed=1)
    ex = HighThroughputExecutor(provider=p)
    kernels.append(DataFlowKernel([ex], seed=0))
    bid = next(iter(p.blocks))
    assert p.status(bid) is BlockState.FAILED
    assert ex.connected_workers() == 0
    assert "capacity lost" in caplog.text


def test_walltime_surfaces_manager_lost(kernels):
    p = LocalProvider(init_blocks=1, max_blocks=1, walltime=1.0)
    ex = HighThroughputExecutor(provider=p, heartbeat_period=0.5)
    dfk = DataFlowKernel([ex], seed=0)
    kernels.append(dfk)
    ex.wait_for_managers(1, 30)
    f = dfk.submit(apps.sleep, (10,))
    with pytest.raises(ManagerLost):
        f.result(15)
    blk = next(iter(p.blocks.values()))
    assert blk.reason == "walltime"


def test_provider_validation():
    with pytest.raises(ConfigError):
        LocalProvider(init_blocks=3, max_blocks=2)
    with pytest.raises(ConfigError):
        SimLrmProvider(failure_rate=1.5)
    with pytest.raises(ConfigError):
        SimLrmProvider(queue_delay=(2, 1))


def _diamond(dfk):
    a = dfk.submit(apps.identity, (1,))
    b = dfk.submit(apps.add, (a, 10))
    c = dfk.submit(apps.mul, (a, 5))
    squares = [dfk.submit(apps.mul, (i, i)) for i in range(10)]
    return [dfk.submit(apps.add, (b, c)).result(30)] + [f.result(30) for f in squares]


def test_provider_interchangeability(kernels):
    outcomes = []
    for p in (LocalProvider(init_blocks=2, max_blocks=2),
              SimLrmProvider(queue_delay=0.0, init_blocks=2, max_blocks=2)):
        ex = HighThroughputExecutor(provider=p)
        dfk = DataFlowKernel([ex], seed=0)
        kernels.append(dfk)
        ex.wait_for_managers(2, 30)
        outcomes.append((_diamond(dfk), p.counts()))
    assert outcomes[0] == outcomes[1]
    assert outcomes[0][0][0] == 16
