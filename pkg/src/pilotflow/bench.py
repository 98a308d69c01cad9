"""Desk-scale benchmarks: latency, throughput, strong/weak scaling, elasticity.

Every benchmark returns a :class:`BenchReport` that keeps the raw samples
next to the summary statistics, plus a fingerprint of the machine it ran on.
"""

from __future__ import annotations

import csv
import datetime
import json
import logging
import math
import os
import platform
import socket
import statistics
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field

from . import apps
from .dflow import DataFlowKernel
from .monitoring import Monitor, compute_utilization

logger = logging.getLogger(__name__)


@dataclass
class BenchReport:
    experiment: str
    parameters: dict
    samples: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)  # tables: scaling sweep, block timeline

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, default=str)

    def write_csv(self, path):
        """Table rows when there are any, otherwise one row per raw sample."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if self.rows:
                cols = list(self.rows[0])
                w = csv.DictWriter(fh, fieldnames=cols)
                w.writeheader()
                w.writerows(self.rows)
            else:
                w = csv.writer(fh)
                w.writerow(["index", "value"])
                w.writerows(enumerate(self.samples))

    def format(self) -> str:
        lines = [f"experiment: {self.experiment}"]
        lines += [f"  {k} = {v}" for k, v in self.parameters.items()]
        lines.append("summary:")
        for k, v in self.summary.items():
            lines.append(f"  {k}: {round(v, 4) if isinstance(v, float) else v}")
        if self.rows and self.experiment == "scaling":
            cols = list(self.rows[0])
            lines.append("\t".join(cols))
            for r in self.rows:
                lines.append("\t".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c])
                                       for c in cols))
        return "\n".join(lines)


def summarize(samples) -> dict:
    """min/median/mean/p99 (nearest rank) of a sample list."""
    xs = sorted(samples)
    if not xs:
        return {"n": 0, "min": None, "median": None, "mean": None, "p99": None}
    return {"n": len(xs), "min": xs[0], "median": statistics.median(xs),
            "mean": statistics.fmean(xs), "p99": xs[max(0, math.ceil(0.99 * len(xs)) - 1)]}


def environment() -> dict:
    from . import __version__
    return {
        "python": sys.version.split()[0],
        "implementation": platform.python_implementation(),
        "platform": platform.platform(),
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
        "hostname": socket.gethostname(),
        "pilotflow": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }


# executors ------------------------------------------------------------------

def make_executor(kind: str, workers: int = 1, prefetch: int = 0, config=None,
                  seed: int | None = None):
    """A fresh executor of ``kind``; taken from ``config`` when one is given."""
    if config is not None:
        from .config import build_executor
        for ec in config.executors:
            if ec.label == kind or ec.type == kind:
                return build_executor(ec, seed)
        from .errors import ConfigError
        raise ConfigError("executor", f"no executor {kind!r} in configuration")
    if kind == "local":
        from .executors.local import LocalExecutor
        return LocalExecutor("local", workers=workers)
    if kind == "htex":
        from .executors.htex import HighThroughputExecutor
        return HighThroughputExecutor("htex", workers_per_node=workers,
                                      prefetch_capacity=prefetch, seed=seed)
    if kind == "llex":
        from .executors.llex import LowLatencyExecutor
        return LowLatencyExecutor("llex", workers=workers)
    from .errors import ConfigError
    raise ConfigError("executor", f"unknown executor {kind!r}")


def wait_ready(ex, timeout: float = 60.0):
    """Block until the executor's initial workers are connected."""
    if hasattr(ex, "wait_for_managers"):
        ex.wait_for_managers(ex.provider.init_blocks, timeout)
    elif hasattr(ex, "wait_for_workers"):
        ex.wait_for_workers(ex.workers * ex.provider.init_blocks, timeout)


def _kernel(ex, seed, monitor=None) -> DataFlowKernel:
    dfk = DataFlowKernel([ex], seed=seed, monitor=monitor)
    try:
        wait_ready(ex)
    except Exception:
        dfk.shutdown()
        raise
    return dfk


# experiments ----------------------------------------------------------------

def latency(executor: str = "htex", tasks: int = 1000, warmup: int = 10, config=None,
            seed: int | None = None) -> BenchReport:
    """Sequential no-op round trips through the kernel, in milliseconds.

    The worker is connected before the first measured task, and ``warmup``
    unrecorded tasks run first.
    """
    ex = make_executor(executor, 1, config=config, seed=seed)
    dfk = _kernel(ex, seed)
    samples = []
    try:
        for _ in range(warmup):
            dfk.submit(apps.noop).result()
        for _ in range(tasks):
            t0 = time.perf_counter()
            dfk.submit(apps.noop).result()
            samples.append((time.perf_counter() - t0) * 1e3)
    finally:
        dfk.shutdown()
    summary = {f"{k}_ms" if k != "n" else k: v for k, v in summarize(samples).items()}
    return BenchReport("latency", {"executor": executor, "tasks": tasks, "warmup": warmup,
                                   "seed": dfk.seed},
                       samples, summary, environment())


def throughput(executor: str = "htex", tasks: int = 10000, workers: int = 4,
               duration: float = 0.0, prefetch: int = 16, config=None,
               seed: int | None = None) -> BenchReport:
    """Submit ``tasks`` tasks at once and time until the last completes.

    Samples are per-task completion times in seconds since the first submit.
    """
    params = {"executor": executor, "tasks": tasks, "workers": workers,
              "duration_s": duration, "prefetch": prefetch}
    if tasks <= 0:
        return BenchReport("throughput", params, [], {"n": 0, "tasks_per_s": None},
                           environment())
    ex = make_executor(executor, workers, prefetch, config=config, seed=seed)
    dfk = _kernel(ex, seed)
    done = []
    try:
        t0 = time.perf_counter()
        futs = [dfk.submit(apps.sleep, (duration,)) if duration else dfk.submit(apps.noop)
                for _ in range(tasks)]
        for f in futs:
            f.add_done_callback(lambda _f: done.append(time.perf_counter()))
        for f in futs:
            f.result()
        elapsed = time.perf_counter() - t0
    finally:
        dfk.shutdown()
    samples = sorted(t - t0 for t in done)
    params["seed"] = dfk.seed
    summary = {**summarize(samples), "elapsed_s": elapsed, "tasks_per_s": tasks / elapsed}
    return BenchReport("throughput", params, samples, summary, environment())


def bookkeeping_cost(n: int, seed: int = 0) -> tuple[int, float]:
    """``(n + e, kernel CPU seconds)`` for a random no-op graph of ``n`` tasks.

    Each task depends on up to two earlier ones. Tasks run inline so the
    measured time is graph bookkeeping only.
    """
    import random
    from .executors.local import ImmediateExecutor
    rng = random.Random(seed)
    dfk = DataFlowKernel([ImmediateExecutor()], seed=seed)
    futs, edges = [], 0
    try:
        for i in range(n):
            deps = [futs[j] for j in {rng.randrange(i) for _ in range(2)}] if i else []
            edges += len(deps)
            futs.append(dfk.submit(apps.add, tuple(deps)) if deps else dfk.submit(apps.noop))
        dfk.wait_all()
    finally:
        dfk.shutdown()
    return n + edges, dfk.bookkeeping_time

def _timed_batch(dfk, n: int, duration: float) -> float:
    t0 = time.perf_counter()
    futs = [dfk.submit(apps.sleep, (duration,)) for _ in range(n)]
    for f in futs:
        f.result()
    return time.perf_counter() - t0


def scaling(mode: str = "strong", durations=(0.0, 0.01, 0.1, 1.0),
            workers=(1, 2, 4, 8, 16, 32), tasks: int = 64, executor: str = "htex",
            seed: int | None = None) -> BenchReport:
    """Completion time against worker count.

    ``strong`` runs ``tasks`` tasks for every worker count, ``weak`` runs
    ten per worker. Each row carries the ideal time ``ceil(n/W) * d`` plus
    the overhead measured by the zero-duration run at the same ``W`` and
    ``n``, and the relative deviation from that.
    """
    if mode not in ("strong", "weak"):
        raise ValueError("mode must be 'strong' or 'weak'")
    rows = []
    for w in workers:
        n = tasks if mode == "strong" else 10 * w
        ex = make_executor(executor, w, seed=seed)
        dfk = _kernel(ex, seed)
        try:
            _timed_batch(dfk, w, 0.0)  # warm the pipeline
            overhead = _timed_batch(dfk, n, 0.0)
            for d in durations:
                t = overhead if d == 0 else _timed_batch(dfk, n, d)
                ideal = math.ceil(n / w) * d + overhead
                rows.append({"mode": mode, "duration_ms": round(d * 1e3, 3), "workers": w,
                             "tasks": n, "completion_s": t, "overhead_s": overhead,
                             "ideal_s": ideal, "deviation": (t - ideal) / ideal})
        finally:
            dfk.shutdown()
    summary = {}
    for d in durations:
        pts = [(r["workers"], r["completion_s"]) for r in rows if r["duration_ms"] == round(d * 1e3, 3)]
        key = f"d{round(d * 1e3)}ms"
        summary[f"{key}_max_abs_deviation"] = max(abs(r["deviation"]) for r in rows
                                                  if r["duration_ms"] == round(d * 1e3, 3))
        if len(pts) >= 2:
            fit = statistics.linear_regression([p[0] for p in pts], [p[1] for p in pts])
            summary[f"{key}_slope_s_per_worker"] = fit.slope
            summary[f"{key}_intercept_s"] = fit.intercept
            ts = [p[1] for p in sorted(pts)]
            summary[f"{key}_monotone"] = (all(a <= b for a, b in zip(ts, ts[1:]))
                                          or all(a >= b for a, b in zip(ts, ts[1:])))
    params = {"mode": mode, "durations_ms": [d * 1e3 for d in durations],
              "workers": list(workers), "tasks": tasks if mode == "strong" else "10*W",
              "executor": executor}
    samples = [r["completion_s"] for r in rows]
    return BenchReport("scaling", params, samples, summary, environment(), rows)


# elasticity -----------------------------------------------------------------

@dataclass
class ElasticRun:
    label: str
    utilization: float
    makespan: float
    timeline: list          # (t, active_blocks) steps, t relative to run start
    stage_windows: list     # (first launch, last completion) per stage
    scaling_events: list
    monitor_log: str


def four_stage_workflow(dfk, wide: int = 20, long: float = 2.0, short: float = 1.0):
    """wide tasks -> 1 reduce -> wide tasks -> 1 reduce, all sleeps."""
    s1 = [dfk.submit(apps.sleep_then, (long, i)) for i in range(wide)]
    s2 = dfk.submit(apps.sleep_then, (short, s1))
    s3 = [dfk.submit(apps.sleep_then, (long, s2)) for _ in range(wide)]
    s4 = dfk.submit(apps.sleep_then, (short, s3))
    return [s1, [s2], s3, [s4]]


def block_timeline(provider, t0: float) -> list[tuple[float, int]]:
    """Active block count as a step function, from the provider's block histories."""
    from .providers import BlockState
    steps = []
    for b in provider.blocks.values():
        on = None
        for ts, st in b.history:
            if st is BlockState.ACTIVE:
                on = ts
                steps.append((ts - t0, +1))
            elif on is not None and st in (BlockState.TERMINATING, BlockState.FAILED):
                steps.append((ts - t0, -1))
                on = None
    steps.sort()
    out, n = [], 0
    for t, d in steps:
        n += d
        out.append((round(t, 6), n))
    return out


def run_four_stage(elastic: bool, *, wide: int = 20, long: float = 2.0, short: float = 1.0,
                   max_blocks: int = 20, queue_delay: float = 0.1, idle_timeout: float = 0.35,
                   poll_period: float = 0.1, parallelism: float = 1.0,
                   heartbeat_period: float = 1.0, seed: int | None = 0,
                   log_dir: str | None = None) -> ElasticRun:
    """One run of the four-stage workflow on a simulated batch scheduler.

    Each block is one node running one single-worker manager. The static run
    holds ``max_blocks`` blocks throughout; the elastic run starts from the
    same allocation and lets the strategy loop release idle blocks and
    request new ones, each request waiting ``queue_delay`` in the queue.
    """
    from .executors.htex import HighThroughputExecutor
    from .providers import SimLrmProvider
    from .strategy import Strategy, StrategyConfig

    log_dir = log_dir or tempfile.mkdtemp(prefix="pilotflow-elastic-")
    label = "elastic" if elastic else "static"
    log = os.path.join(log_dir, f"{label}.monitor.log")
    provider = SimLrmProvider(queue_delay=queue_delay if elastic else 0.0,
                              init_blocks=max_blocks, min_blocks=0, max_blocks=max_blocks,
                              seed=seed)
    ex = HighThroughputExecutor("htex", provider=provider, workers_per_node=1,
                                heartbeat_period=heartbeat_period, seed=seed)
    monitor = Monitor.to_file(log, seed=seed)
    dfk = _kernel(ex, seed, monitor)
    strategy = None
    try:
        if elastic:
            strategy = Strategy(StrategyConfig(parallelism, poll_period, idle_timeout, 0,
                                               max_blocks, max_blocks),
                                log_path=os.path.join(log_dir, "scaling.log"))
            strategy.start(dfk)
            dfk.strategy = strategy
        stages = four_stage_workflow(dfk, wide, long, short)
        stages[-1][0].result()
        windows = []
        for futs in stages:
            recs = [dfk.tasks[f.task_id] for f in futs]
            windows.append((min(r.launch_time for r in recs) - monitor.t0,
                            max(r.complete_time for r in recs) - monitor.t0))
        timeline = block_timeline(provider, monitor.t0)
    finally:
        dfk.shutdown()
    u = compute_utilization(log)
    return ElasticRun(label, u.percent, u.makespan, timeline, windows,
                      list(strategy.events) if strategy else [], log)


def active_in(timeline, a: float, b: float) -> tuple[int, int]:
    """(min, max) active block count over the window [a, b]."""
    level = 0
    for t, n in timeline:
        if t <= a:
            level = n
    seen = [level] + [n for t, n in timeline if a < t <= b]
    return min(seen), max(seen)


def rise_and_fall(run: ElasticRun) -> bool:
    """True when blocks drop during both reduce stages and recover for the second wide stage."""
    w1, r1, w2, r2 = run.stage_windows
    peak1 = active_in(run.timeline, *w1)[1]
    low1 = active_in(run.timeline, *r1)[0]
    peak2 = active_in(run.timeline, w2[0], w2[1])[1]
    low2 = active_in(run.timeline, *r2)[0]
    return low1 < peak1 and peak2 > low1 and low2 < peak2


def elasticity(seed: int | None = 0, **kw) -> BenchReport:
    static = run_four_stage(False, seed=seed, **kw)
    elastic = run_four_stage(True, seed=seed, **kw)
    rows = [{"run": r.label, "t_s": t, "active_blocks": n}
            for r in (static, elastic) for t, n in r.timeline]
    summary = {
        "static_utilization_pct": static.utilization,
        "elastic_utilization_pct": elastic.utilization,
        "static_makespan_s": static.makespan,
        "elastic_makespan_s": elastic.makespan,
        "makespan_increase_pct": 100.0 * (elastic.makespan / static.makespan - 1.0),
        "scaling_events": len(elastic.scaling_events),
        "rise_and_fall": rise_and_fall(elastic),
    }
    params = {"wide": kw.get("wide", 20), "long_s": kw.get("long", 2.0),
              "short_s": kw.get("short", 1.0), "max_blocks": kw.get("max_blocks", 20),
              "queue_delay_s": kw.get("queue_delay", 0.1),
              "idle_timeout_s": kw.get("idle_timeout", 0.35),
              "poll_period_s": kw.get("poll_period", 0.1), "seed": seed,
              "monitor_logs": [static.monitor_log, elastic.monitor_log]}
    samples = [static.utilization, elastic.utilization]
    report = BenchReport("elasticity", params, samples, summary, environment(), rows)
    report.runs = (static, elastic)
    return report
