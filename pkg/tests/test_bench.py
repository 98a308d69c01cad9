import json
import os
import statistics
import time
from types import SimpleNamespace

import pytest

from pilotflow import bench
from pilotflow.providers import BlockState


def test_summarize_nearest_rank():
    xs = list(range(1, 101))
    s = bench.summarize(reversed(xs))
    assert (s["n"], s["min"], s["p99"]) == (100, 1, 99)
    assert s["median"] == statistics.median(xs) and s["mean"] == 50.5
    assert bench.summarize([])["n"] == 0
    assert bench.summarize([3.0])["p99"] == 3.0


def test_latency_single_sample():
    r = bench.latency("local", tasks=1)
    assert len(r.samples) == 1 and r.summary["n"] == 1
    assert r.environment["cpu_count"] == os.cpu_count()


def test_latency_local_sanity():
    r = bench.latency("local", tasks=200)
    assert r.summary["median_ms"] < 5.0


def test_throughput_empty():
    r = bench.throughput("local", tasks=0)
    assert r.samples == [] and r.summary["n"] == 0


def test_throughput_more_workers_faster():
    one = bench.throughput("local", tasks=40, workers=1, duration=0.01)
    eight = bench.throughput("local", tasks=40, workers=8, duration=0.01)
    assert len(one.samples) == 40
    assert eight.summary["tasks_per_s"] > one.summary["tasks_per_s"]


def test_scaling_rows_and_serial_case():
    r = bench.scaling("strong", durations=(0.0, 0.05), workers=(1, 2), tasks=4,
                      executor="local")
    assert len(r.rows) == 4
    serial = [x for x in r.rows if x["workers"] == 1 and x["duration_ms"] == 50][0]
    assert serial["completion_s"] == pytest.approx(4 * 0.05 + serial["overhead_s"], abs=0.05)
    assert all(x["ideal_s"] == pytest.approx(-(-x["tasks"] // x["workers"]) * x["duration_ms"]
                                             / 1e3 + x["overhead_s"]) for x in r.rows)
    assert "d50ms_slope_s_per_worker" in r.summary


def test_weak_scaling_task_count():
    r = bench.scaling("weak", durations=(0.0,), workers=(1, 2), executor="local")
    assert [x["tasks"] for x in r.rows] == [10, 20]
    with pytest.raises(ValueError):
        bench.scaling("medium")


def test_report_files(workdir):
    r = bench.BenchReport("x", {"a": 1}, [1.0, 2.0], bench.summarize([1.0, 2.0]), {})
    r.write_csv(os.path.join(workdir, "x.csv"))
    r.write_json(os.path.join(workdir, "x.json"))
    assert open(os.path.join(workdir, "x.csv")).read().splitlines() == ["index,value", "0,1.0",
                                                                        "1,2.0"]
    assert json.load(open(os.path.join(workdir, "x.json")))["samples"] == [1.0, 2.0]
    assert "experiment: x" in r.format()


def _fake_provider(spans):
    blocks = {}
    for i, (on, off) in enumerate(spans):
        hist = [(on - 0.1, BlockState.QUEUED), (on, BlockState.ACTIVE)]
        if off is not None:
            hist += [(off, BlockState.TERMINATING), (off + 0.01, BlockState.DONE)]
        blocks[str(i)] = SimpleNamespace(history=hist)
    return SimpleNamespace(blocks=blocks)


def test_block_timeline_and_active_in():
    tl = bench.block_timeline(_fake_provider([(1.0, 3.0), (2.0, None)]), t0=0.0)
    assert tl == [(1.0, 1), (2.0, 2), (3.0, 1)]
    assert bench.active_in(tl, 0.0, 0.5) == (0, 0)
    assert bench.active_in(tl, 1.5, 3.5) == (1, 2)


def _run(timeline):
    windows = [(0.0, 2.0), (2.0, 3.0), (3.0, 5.0), (5.0, 6.0)]
    return bench.ElasticRun("elastic", 0.0, 6.0, timeline, windows, [], "")


def test_rise_and_fall():
    shaped = [(0.0, 20), (2.5, 1), (3.1, 20), (5.5, 1), (6.2, 0)]
    assert bench.rise_and_fall(_run(shaped))
    flat = [(0.0, 20), (6.2, 0)]
    assert not bench.rise_and_fall(_run(flat))


def test_four_stage_shape(local_dfk):
    stages = bench.four_stage_workflow(local_dfk, wide=3, long=0.01, short=0.01)
    assert [len(s) for s in stages] == [3, 1, 3, 1]
    stages[-1][0].result(10)
    recs = {f.task_id: local_dfk.tasks[f.task_id] for s in stages for f in s}
    reduce1 = recs[stages[1][0].task_id]
    assert reduce1.depends_on == {f.task_id for f in stages[0]}
