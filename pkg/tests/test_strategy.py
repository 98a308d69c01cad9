import time

import pytest
from hypothesis import given, strategies as st

from pilotflow import DataFlowKernel, apps
from pilotflow.errors import ConfigError
from pilotflow.executors.htex import HighThroughputExecutor
from pilotflow.providers import LocalProvider
from pilotflow.strategy import (LoadSnapshot, Strategy, StrategyConfig, read_scaling_log,
                                required_blocks, strategy_tick)


def test_formula_examples():
    cfg = StrategyConfig(parallelism=1.0, min_blocks=0, max_blocks=8, init_blocks=0)
    d = strategy_tick(LoadSnapshot(20, 1), cfg)
    assert (d.action, d.count) == ("scale_out", 8)
    assert required_blocks(20, 0.5, 1, 0, 100) == 10
    assert required_blocks(7, 1.0, 4, 0, 100) == 2
    assert required_blocks(0, 1.0, 4, 1, 100) == 1


def test_idle_drain_scales_in_all():
    cfg = StrategyConfig(idle_timeout=10.0, min_blocks=0, max_blocks=4, init_blocks=0)
    snap = LoadSnapshot(0, 1, active_blocks=3,
                        idle_block_ages={"a": 11.0, "b": 30.0, "c": 12.0})
    d = strategy_tick(snap, cfg)
    assert d.action == "scale_in" and d.blocks == ["b", "c", "a"]


def test_recent_or_busy_blocks_kept():
    cfg = StrategyConfig(idle_timeout=10.0, min_blocks=1, max_blocks=4, init_blocks=1)
    snap = LoadSnapshot(0, 1, active_blocks=3,
                        idle_block_ages={"a": 11.0, "b": 2.0, "c": None})
    d = strategy_tick(snap, cfg)
    assert d.blocks == ["a"]


def test_config_validation():
    with pytest.raises(ConfigError):
        StrategyConfig(parallelism=0.0)
    with pytest.raises(ConfigError):
        StrategyConfig(min_blocks=3, init_blocks=2, max_blocks=4)


@st.composite
def scenario(draw):
    max_b = draw(st.integers(1, 8))
    min_b = draw(st.integers(0, max_b))
    cfg = StrategyConfig(parallelism=draw(st.floats(0.05, 1.0)), idle_timeout=1.0,
                         min_blocks=min_b, max_blocks=max_b, init_blocks=min_b)
    loads = draw(st.lists(st.integers(0, 60), min_size=1, max_size=30))
    return cfg, draw(st.integers(1, 4)), loads


@given(scenario())
def test_bounds_and_no_thrash(sc):
    cfg, slots, loads = sc
    # block id -> idle age; None while busy. Blocks start idle for 0 s.
    blocks = {f"b{i}": 0.0 for i in range(cfg.init_blocks)}
    born = {b: 0 for b in blocks}
    ids = iter(range(100, 10_000))
    for tick, load in enumerate(loads):
        snap = LoadSnapshot(load, slots, active_blocks=len(blocks),
                            idle_block_ages=dict(blocks))
        d = strategy_tick(snap, cfg)
        assert not (d.action == "scale_out" and d.blocks)
        if d.action == "scale_out":
            for _ in range(d.count):
                b = f"b{next(ids)}"
                blocks[b], born[b] = 0.0, tick
        elif d.action == "scale_in":
            for b in d.blocks:
                assert blocks[b] is not None and blocks[b] >= cfg.idle_timeout
                del blocks[b]
        assert cfg.min_blocks <= len(blocks) <= cfg.max_blocks
        busy = min(len(blocks), -(-load // slots))
        for i, b in enumerate(sorted(blocks)):
            blocks[b] = None if i < busy else (blocks[b] or 0.0) + 0.5


def _scalable(kernels, provider, cfg, tmp):
    ex = HighThroughputExecutor(provider=provider, heartbeat_period=0.5)
    strategy = Strategy(cfg, log_path=f"{tmp}/scaling.log")
    dfk = DataFlowKernel([ex], seed=0, strategy=strategy)
    kernels.append(dfk)
    ex.wait_for_managers(provider.init_blocks, 30)
    return dfk, ex, strategy


def test_single_block_cap_with_many_tasks(kernels, workdir):
    p = LocalProvider(init_blocks=1, min_blocks=0, max_blocks=1)
    dfk, ex, strategy = _scalable(kernels, p, StrategyConfig(poll_period=0.05, idle_timeout=30,
                                                             max_blocks=1), workdir)
    for f in [dfk.submit(apps.noop) for _ in range(1000)]:
        f.result(120)
    assert len(p.blocks) == 1
    assert strategy.events == []


def test_static_workload_no_events(kernels, workdir):
    p = LocalProvider(init_blocks=2, min_blocks=0, max_blocks=4)
    dfk, ex, strategy = _scalable(kernels, p, StrategyConfig(poll_period=0.05, idle_timeout=30,
                                                             max_blocks=4, init_blocks=2),
                                  workdir)
    for _ in range(3):
        for f in [dfk.submit(apps.sleep, (0.2,)) for _ in range(2)]:
            f.result(30)
    assert strategy.events == []
    assert len(p.blocks) == 2


def test_scale_out_then_in(kernels, workdir):
    p = LocalProvider(init_blocks=0, min_blocks=0, max_blocks=3)
    dfk, ex, strategy = _scalable(kernels, p, StrategyConfig(poll_period=0.05, idle_timeout=0.3,
                                                             max_blocks=3, init_blocks=0),
                                  workdir)
    for f in [dfk.submit(apps.sleep, (0.5,)) for _ in range(6)]:
        f.result(60)
    deadline = time.time() + 10
    while p.active_blocks() and time.time() < deadline:
        time.sleep(0.05)
    kinds = [e["decision"] for e in strategy.events]
    assert "scale_out" in kinds and kinds[-1] == "scale_in"
    assert 1 <= len(p.blocks) <= 3 * len(kinds)
    assert not p.active_blocks()
    logged = read_scaling_log(f"{workdir}/scaling.log")
    assert [e["decision"] for e in logged] == kinds
    for e in logged:
        assert e["active_blocks"] + e["pending_blocks"] <= 3
