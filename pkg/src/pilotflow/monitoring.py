"""Task-state and resource event log, plus the utilization report built from it.

File format: line-delimited, tab-separated. The first line is a header::

    #pilotflow-monitor <TAB> version=1 <TAB> run=<id> <TAB> seed=<seed> <TAB> t0=<epoch>

and every following line is ``<µs since t0> <TAB> <task id> <TAB> <kind> <TAB> <json>``.
Events that do not belong to a task use task id ``-1``.
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable

from .errors import IncompleteLog
from .tasks import TaskState, is_legal_path

FORMAT_VERSION = 1
HEADER_TAG = "#pilotflow-monitor"

STATE = "STATE"
DISPATCH = "DISPATCH"
MANAGER = "MANAGER"
BLOCK = "BLOCK"
STAGE = "STAGE"

_TERMINAL = {TaskState.SUCCEEDED.value, TaskState.FAILED.value, TaskState.MEMO_HIT.value}


@dataclass
class MonitorEvent:
    ts: float  # seconds since run start
    task_id: int
    kind: str
    detail: dict = field(default_factory=dict)

    def to_line(self) -> str:
        return (f"{int(round(self.ts * 1e6))}\t{self.task_id}\t{self.kind}\t"
                f"{json.dumps(self.detail, separators=(',', ':'), sort_keys=True)}\n")

    @classmethod
    def from_line(cls, line: str) -> MonitorEvent:
        us, tid, kind, detail = line.rstrip("\n").split("\t", 3)
        return cls(int(us) / 1e6, int(tid), kind, json.loads(detail))


class Sink:
    def append(self, event: MonitorEvent) -> None:
        raise NotImplementedError

    def flush(self) -> None:
        pass

    def close(self) -> None:
        self.flush()


class MemorySink(Sink):
    def __init__(self):
        self.events: list[MonitorEvent] = []
        self._lock = threading.Lock()

    def append(self, event):
        with self._lock:
            self.events.append(event)


class FileSink(Sink):
    """Serialized line writer. Each event is one ``write`` under a lock."""

    def __init__(self, path: str | os.PathLike, run_id: str, seed: Any, t0: float):
        self.path = os.fspath(path)
        self._lock = threading.Lock()
        self._fh = open(self.path, "w", encoding="utf-8")
        self._fh.write(f"{HEADER_TAG}\tversion={FORMAT_VERSION}\trun={run_id}"
                       f"\tseed={seed}\tt0={t0!r}\n")
        self._fh.flush()

    def append(self, event):
        line = event.to_line()
        with self._lock:
            if not self._fh.closed:
                self._fh.write(line)

    def flush(self):
        with self._lock:
            if not self._fh.closed:
                self._fh.flush()

    def close(self):
        with self._lock:
            if not self._fh.closed:
                self._fh.close()


class Monitor:
    """Fan-in point for events from the kernel loop and executor threads."""

    def __init__(self, sinks: Iterable[Sink] = (), run_id: str | None = None,
                 seed: Any = None, t0: float | None = None):
        self.t0 = time.time() if t0 is None else t0
        self.run_id = run_id or uuid.uuid4().hex[:12]
        self.seed = seed
        self.sinks = list(sinks)

    @classmethod
    def to_file(cls, path, seed=None, run_id=None) -> Monitor:
        mon = cls(seed=seed, run_id=run_id)
        mon.sinks.append(FileSink(path, mon.run_id, seed, mon.t0))
        return mon

    def rel(self, epoch: float) -> float:
        return epoch - self.t0

    def emit(self, kind: str, task_id: int = -1, ts: float | None = None, **detail) -> None:
        if not self.sinks:
            return
        ev = MonitorEvent((time.time() if ts is None else ts) - self.t0, task_id, kind, detail)
        for s in self.sinks:
            s.append(ev)

    def flush(self):
        for s in self.sinks:
            s.flush()

    def close(self):
        for s in self.sinks:
            s.close()


def read_log(path: str | os.PathLike) -> tuple[dict, list[MonitorEvent]]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith(HEADER_TAG):
            raise IncompleteLog(f"{path}: missing header")
        header = dict(part.split("=", 1) for part in first.rstrip("\n").split("\t")[1:])
        events = [MonitorEvent.from_line(line) for line in fh if line.strip()]
    return header, events


def state_histories(events: Iterable[MonitorEvent]) -> dict[int, list[TaskState]]:
    """Per-task state sequence reconstructed from STATE events."""
    hist: dict[int, list[TaskState]] = {}
    for ev in events:
        if ev.kind != STATE:
            continue
        if ev.detail["from"] is None:
            hist[ev.task_id] = [TaskState(ev.detail["to"])]
            continue
        seq = hist.setdefault(ev.task_id, [TaskState(ev.detail["from"])])
        if seq[-1].value != ev.detail["from"]:
            raise IncompleteLog(f"task {ev.task_id}: gap before {ev.detail['from']}")
        seq.append(TaskState(ev.detail["to"]))
    return hist


def validate_histories(events: Iterable[MonitorEvent]) -> dict[int, list[TaskState]]:
    """Raise unless every task has a legal, terminated, time-ordered history."""
    events = list(events)
    last_ts: dict[int, float] = {}
    for ev in events:
        if ev.task_id < 0:
            continue
        if ev.ts + 1e-6 < last_ts.get(ev.task_id, float("-inf")):
            raise IncompleteLog(f"task {ev.task_id}: events out of order")
        last_ts[ev.task_id] = ev.ts
    hist = state_histories(events)
    for tid, seq in hist.items():
        if not is_legal_path(seq):
            raise IncompleteLog(f"task {tid}: illegal history {[s.name for s in seq]}")
        if seq[-1].value not in _TERMINAL:
            raise IncompleteLog(f"task {tid}: no terminal state")
    return hist


def summarize(events: Iterable[MonitorEvent]) -> dict[str, int]:
    counts = {"succeeded": 0, "failed": 0, "memo_hits": 0}
    for tid, seq in state_histories(events).items():
        last = seq[-1]
        if last is TaskState.SUCCEEDED:
            counts["succeeded"] += 1
        elif last is TaskState.MEMO_HIT:
            counts["memo_hits"] += 1
        elif last is TaskState.FAILED:
            counts["failed"] += 1
    return counts


@dataclass
class Utilization:
    utilization: float  # fraction in [0, 1]
    makespan: float
    busy: dict[str, list[tuple[float, float]]]
    lifetimes: dict[str, tuple[float, float]]
    window: tuple[float, float]

    @property
    def percent(self) -> float:
        return 100.0 * self.utilization


def compute_utilization(log: str | os.PathLike | Iterable[MonitorEvent]) -> Utilization:
    """Σ task busy time over Σ worker lifetime, both clipped to the makespan window.

    The window runs from the first launch to the last task completion.
    Worker lifetimes come from MANAGER ``registered``/``lost``/``exited`` events;
    busy intervals from the ``start``/``end``/``worker`` detail on terminal
    STATE events.
    """
    if isinstance(log, (str, os.PathLike)):
        _, events = read_log(log)
    else:
        events = list(log)
    first_launch = None
    last_done = None
    busy: dict[str, list[tuple[float, float]]] = defaultdict(list)
    started: dict[str, float] = {}
    lifetimes: dict[str, tuple[float, float]] = {}
    pending_tasks: set[int] = set()
    for ev in events:
        d = ev.detail
        if ev.kind == STATE:
            to = d["to"]
            if to == TaskState.LAUNCHED.value and (first_launch is None or ev.ts < first_launch):
                first_launch = ev.ts
            if to == TaskState.PENDING.value:
                pending_tasks.add(ev.task_id)
            if to in _TERMINAL:
                pending_tasks.discard(ev.task_id)
                if to != TaskState.MEMO_HIT.value and (last_done is None or ev.ts > last_done):
                    last_done = ev.ts
            if "start" in d and "end" in d and "worker" in d:
                busy[d["worker"]].append((d["start"], d["end"]))
        elif ev.kind == MANAGER:
            workers = [f"{d['manager']}:{i}" for i in range(int(d.get("workers", 1)))]
            if d["event"] == "registered":
                for w in workers:
                    started.setdefault(w, ev.ts)
            elif d["event"] in ("lost", "exited", "removed"):
                for w in workers:
                    if w in started:
                        lifetimes[w] = (started.pop(w), ev.ts)
    if pending_tasks:
        raise IncompleteLog(f"{len(pending_tasks)} tasks without a terminal event")
    if first_launch is None or last_done is None:
        raise IncompleteLog("no executed tasks in log")
    for w, t in started.items():
        lifetimes[w] = (t, float("inf"))
    if not lifetimes:
        raise IncompleteLog("no worker lifetime events in log")
    lo, hi = first_launch, last_done

    def clip(a, b):
        return max(0.0, min(b, hi) - max(a, lo))

    total_busy = sum(clip(a, b) for ivs in busy.values() for a, b in ivs)
    total_life = sum(clip(a, b) for a, b in lifetimes.values())
    util = total_busy / total_life if total_life > 0 else 0.0
    return Utilization(util, hi - lo, dict(busy), lifetimes, (lo, hi))
