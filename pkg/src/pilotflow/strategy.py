"""Elastic scaling: turn outstanding load into block requests and releases.

The controller is proportional with hysteresis::

    required = clamp(ceil(outstanding * parallelism / slots_per_block), min_blocks, max_blocks)

If active plus pending blocks fall short of ``required`` the difference is
requested. Otherwise blocks idle for at least ``idle_timeout`` are released,
longest-idle first, never going below ``max(required, min_blocks)``. A tick
never does both.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field

from .errors import ConfigError
from .providers import BlockState

logger = logging.getLogger(__name__)


@dataclass
class StrategyConfig:
    parallelism: float = 1.0
    poll_period: float = 1.0
    idle_timeout: float = 10.0
    min_blocks: int = 0
    max_blocks: int = 10
    init_blocks: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.parallelism <= 1.0:
            raise ConfigError("strategy.parallelism", "must be in (0, 1]")
        if self.poll_period <= 0:
            raise ConfigError("strategy.poll_period", "must be positive")
        if self.idle_timeout < 0:
            raise ConfigError("strategy.idle_timeout", "must be >= 0")
        if not 0 <= self.min_blocks <= self.init_blocks <= self.max_blocks:
            raise ConfigError("strategy.init_blocks",
                              "need 0 <= min_blocks <= init_blocks <= max_blocks")


@dataclass
class LoadSnapshot:
    outstanding_tasks: int
    slots_per_block: int
    active_blocks: int = 0
    pending_blocks: int = 0
    active_slots: int = 0
    idle_block_ages: dict = field(default_factory=dict)
    ts: float = field(default_factory=time.time)


@dataclass
class Decision:
    action: str  # "scale_out", "scale_in" or "none"
    count: int = 0
    blocks: list = field(default_factory=list)
    required: int = 0


def required_blocks(outstanding: int, parallelism: float, slots_per_block: int,
                    min_blocks: int, max_blocks: int) -> int:
    want = math.ceil(outstanding * parallelism / max(1, slots_per_block))
    return max(min_blocks, min(max_blocks, want))


def strategy_tick(snap: LoadSnapshot, cfg: StrategyConfig) -> Decision:
    required = required_blocks(snap.outstanding_tasks, cfg.parallelism, snap.slots_per_block,
                               cfg.min_blocks, cfg.max_blocks)
    have = snap.active_blocks + snap.pending_blocks
    if have < required:
        return Decision("scale_out", required - have, required=required)
    floor = max(required, cfg.min_blocks)
    spare = have - floor
    if spare > 0:
        idle = sorted((age, bid) for bid, age in snap.idle_block_ages.items()
                      if age is not None and age >= cfg.idle_timeout)
        victims = [bid for _, bid in reversed(idle)][:spare]
        if victims:
            return Decision("scale_in", len(victims), victims, required)
    return Decision("none", required=required)


def snapshot(executor) -> LoadSnapshot:
    """Read one executor's load; block state and idle ages come from one query."""
    blocks = executor.block_snapshot()
    active = [b for b, s in blocks.items() if s["state"] is BlockState.ACTIVE]
    pending = [b for b, s in blocks.items()
               if s["state"] in (BlockState.REQUESTED, BlockState.QUEUED)]
    return LoadSnapshot(
        outstanding_tasks=executor.pending_count(),
        slots_per_block=executor.slots_per_block,
        active_blocks=len(active),
        pending_blocks=len(pending),
        active_slots=executor.connected_workers() + executor.prefetch_capacity * sum(
            len(blocks[b]["managers"]) for b in active),
        idle_block_ages={b: blocks[b]["idle_age"] for b in active},
    )


class Strategy:
    """Background loop applying :func:`strategy_tick` to scalable executors.

    Scaling decisions are appended to ``log_path`` (one JSON object per line)
    and kept in :attr:`events`; :attr:`timeline` samples block counts every
    tick.
    """

    def __init__(self, config: StrategyConfig | None = None, log_path: str | None = None,
                 executors: list[str] | None = None):
        self.config = config or StrategyConfig()
        self.log_path = log_path
        self.labels = executors
        self.events: list[dict] = []
        self.timeline: list[tuple[float, str, int, int]] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._fh = None
        self.t0 = time.time()

    def start(self, dfk):
        self.dfk = dfk
        self.t0 = dfk.monitor.t0
        if self.log_path:
            self._fh = open(self.log_path, "a", encoding="utf-8")
        self._thread = threading.Thread(target=self._run, name="strategy", daemon=True)
        self._thread.start()

    def targets(self):
        for label, ex in self.dfk.executors.items():
            if not getattr(ex, "scalable", False):
                continue
            if self.labels is not None and label not in self.labels:
                continue
            if ex.status.value != "running":
                continue
            yield label, ex

    def _run(self):
        while not self._stop.wait(self.config.poll_period):
            for label, ex in self.targets():
                try:
                    self.tick(label, ex)
                except Exception:
                    logger.exception("strategy tick for %s failed", label)

    def limits_for(self, ex) -> StrategyConfig:
        """Block limits come from the executor's provider when it has one."""
        p = getattr(ex, "provider", None)
        if p is None:
            return self.config
        return dataclasses.replace(self.config, min_blocks=p.min_blocks,
                                   max_blocks=p.max_blocks, init_blocks=p.init_blocks)

    def tick(self, label, ex) -> Decision:
        snap = snapshot(ex)
        decision = strategy_tick(snap, self.limits_for(ex))
        now = time.time()
        self.timeline.append((now - self.t0, label, snap.active_blocks, snap.pending_blocks))
        if decision.action == "scale_out":
            decision.blocks = ex.scale_out(decision.count)
        elif decision.action == "scale_in":
            decision.blocks = ex.scale_in(decision.blocks)
            decision.count = len(decision.blocks)
        if decision.action != "none" and decision.count:
            self._record(now, label, decision, snap)
        return decision

    def _record(self, now, label, decision: Decision, snap: LoadSnapshot):
        rec = {"ts": round(now - self.t0, 6), "executor": label, "decision": decision.action,
               "count": decision.count, "blocks": decision.blocks,
               "required": decision.required, "outstanding": snap.outstanding_tasks,
               "active_blocks": snap.active_blocks, "pending_blocks": snap.pending_blocks}
        self.events.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec) + "\n")
            self._fh.flush()
        self.dfk.monitor.emit("BLOCK", -1, now, executor=label, event=decision.action,
                              count=decision.count, blocks=decision.blocks)

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_scaling_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


__all__ = ["StrategyConfig", "LoadSnapshot", "Decision", "required_blocks", "strategy_tick",
           "snapshot", "Strategy", "read_scaling_log"]
