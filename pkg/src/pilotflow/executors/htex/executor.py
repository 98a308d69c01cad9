"""HTEX client side: owns the interchange process and the blocks of managers."""

from __future__ import annotations

import itertools
import json
import logging
import os
import subprocess
import sys
import tempfile
import threading
import time

from ...errors import ConfigError, EngineShutdown, ManagerLost, UnknownManager
from ...monitoring import BLOCK, MANAGER
from ...net import BlockingConn
from ...providers import BlockState, ExecutionProvider, LocalProvider
from ..base import (ExecFuture, Executor, ExecutorStatus, complete_from_reply,
                    encode_task)

logger = logging.getLogger(__name__)


class HighThroughputExecutor(Executor):
    """Pilot-job executor: client -> interchange -> managers -> workers.

    ``workers_per_node`` worker processes run under each manager, and each
    manager advertises ``workers_per_node + prefetch_capacity`` slots.
    """

    scalable = True

    def __init__(self, label: str = "htex", provider: ExecutionProvider | None = None,
                 workers_per_node: int = 1, prefetch_capacity: int = 0,
                 heartbeat_period: float = 2.0, heartbeat_threshold: float | None = None,
                 batch_size_max: int = 128, address: str = "127.0.0.1",
                 seed: int | None = None, sandbox_root: str | None = None,
                 log_dir: str | None = None, keep_frame_log: bool = False):
        super().__init__(label)
        if workers_per_node < 1:
            raise ConfigError("workers_per_node", "must be >= 1")
        if prefetch_capacity < 0:
            raise ConfigError("prefetch_capacity", "must be >= 0")
        if heartbeat_threshold is None:
            heartbeat_threshold = 3 * heartbeat_period
        if heartbeat_period <= 0 or heartbeat_threshold <= heartbeat_period:
            raise ConfigError("heartbeat_threshold", "must exceed heartbeat_period")
        if batch_size_max < 1:
            raise ConfigError("batch_size_max", "must be >= 1")
        self.provider = provider or LocalProvider(init_blocks=1, max_blocks=1)
        self.workers_per_node = workers_per_node
        self.prefetch_capacity = prefetch_capacity
        self.heartbeat_period = heartbeat_period
        self.heartbeat_threshold = heartbeat_threshold
        self.batch_size_max = batch_size_max
        self.address = address
        self.seed = seed
        self.sandbox_root = sandbox_root
        self.log_dir = log_dir or tempfile.mkdtemp(prefix=f"pilotflow-{label}-")
        self.provider.log_dir = self.provider.log_dir or self.log_dir

        self._futs: dict[int, ExecFuture] = {}
        self._ids = itertools.count()
        self._lock = threading.Lock()
        self._cmd_lock = threading.Lock()
        self.managers: dict[str, dict] = {}
        self.block_managers: dict[str, set] = {}
        self.last_activity: dict[str, float] = {}
        self.lost_managers: list[dict] = []
        self.result_frames = 0
        self.frame_log: list | None = [] if keep_frame_log else None
        self._registered = threading.Condition()
        self.interchange_proc: subprocess.Popen | None = None
        self.ports: dict | None = None

    # lifecycle -----------------------------------------------------------
    def start(self, monitor=None):
        super().start(monitor)
        self.status = ExecutorStatus.STARTING
        cmd = [sys.executable, "-m", "pilotflow.executors.htex.interchange",
               "--host", self.address,
               "--heartbeat-period", str(self.heartbeat_period),
               "--heartbeat-threshold", str(self.heartbeat_threshold),
               "--batch-size-max", str(self.batch_size_max)]
        if self.seed is not None:
            cmd += ["--seed", str(self.seed)]
        err = open(os.path.join(self.log_dir, "interchange.log"), "ab")
        self.interchange_proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=err,
                                                 stdin=subprocess.DEVNULL)
        err.close()
        line = self.interchange_proc.stdout.readline()
        if not line:
            raise EngineShutdown(f"interchange for {self.label} failed to start")
        self.ports = json.loads(line)
        self.conn = BlockingConn.connect(self.address, self.ports["task_port"])
        self.conn.send({"type": "REGISTER", "role": "client"})
        self.cmd_conn = BlockingConn.connect(self.address, self.ports["command_port"])
        self._receiver = threading.Thread(target=self._receive, name=f"{self.label}-recv",
                                          daemon=True)
        self._receiver.start()
        self.provider.on_event = self._block_event
        self.status = ExecutorStatus.RUNNING
        if self.provider.init_blocks:
            self.scale_out(self.provider.init_blocks)

    def manager_command(self) -> list[str]:
        cmd = [sys.executable, "-m", "pilotflow.executors.htex.manager",
               "--host", self.address, "--port", str(self.ports["task_port"]),
               "--workers", str(self.workers_per_node),
               "--prefetch", str(self.prefetch_capacity),
               "--heartbeat-period", str(self.heartbeat_period),
               "--heartbeat-threshold", str(self.heartbeat_threshold)]
        if self.sandbox_root:
            cmd += ["--sandbox-root", self.sandbox_root]
        return cmd

    def shutdown(self):
        if self.status is ExecutorStatus.STOPPED:
            return
        self.status = ExecutorStatus.DRAINING
        try:
            self.command("SHUTDOWN", timeout=5)
        except Exception:
            pass
        self.provider.shutdown()
        if self.interchange_proc is not None:
            try:
                self.interchange_proc.wait(5)
            except subprocess.TimeoutExpired:
                self.interchange_proc.kill()
                self.interchange_proc.wait()
            self.interchange_proc.stdout.close()
        for c in (getattr(self, "conn", None), getattr(self, "cmd_conn", None)):
            if c is not None:
                c.close()
        with self._lock:
            orphans, self._futs = list(self._futs.values()), {}
        for f in orphans:
            if not f.done():
                f.set_exception(EngineShutdown(f"executor {self.label} shut down"))
        self.status = ExecutorStatus.STOPPED

    # task flow -----------------------------------------------------------
    def submit_task(self, task_id, attempt, app, args, kwargs) -> ExecFuture:
        if self.status is not ExecutorStatus.RUNNING:
            raise EngineShutdown(f"executor {self.label} is not running")
        payload = encode_task(task_id, attempt, app, args, kwargs)
        fut = ExecFuture(task_id, attempt)
        eid = next(self._ids)
        with self._lock:
            self._futs[eid] = fut
            self.submitted += 1
        self.conn.send({"type": "TASK_BATCH", "tasks": [[eid, payload]]})
        return fut

    def pending_count(self) -> int:
        return len(self._futs)

    def _receive(self):
        while True:
            try:
                msgs = self.conn.recv_many(None)
            except OSError:
                msgs = None
            if msgs is None:
                if self.status is ExecutorStatus.RUNNING:
                    logger.error("%s: interchange connection lost", self.label)
                    self._fail_all(ManagerLost("interchange connection lost"))
                return
            for msg in msgs:
                try:
                    self._handle(msg)
                except Exception:
                    logger.exception("%s: bad message %r", self.label, msg.get("type"))

    def _handle(self, msg):
        t = msg["type"]
        if t == "RESULT_BATCH":
            mid = msg["manager"]
            now = time.time()
            self.result_frames += 1
            self.last_activity[mid] = now
            if self.frame_log is not None:
                self.frame_log.append((mid, [r[0] for r in msg["results"]]))
            for eid, reply in msg["results"]:
                with self._lock:
                    fut = self._futs.pop(eid, None)
                if fut is not None:
                    complete_from_reply(fut, reply)
        elif t == "REGISTER":
            mid = msg["manager_id"]
            info = {"block_id": msg.get("block_id"), "workers": msg.get("workers", 1),
                    "capacity": msg.get("capacity"), "pid": msg.get("pid"),
                    "registered": time.time()}
            with self._registered:
                self.managers[mid] = info
                self.block_managers.setdefault(info["block_id"], set()).add(mid)
                self.last_activity[mid] = info["registered"]
                self._registered.notify_all()
            self._emit(MANAGER, event="registered", manager=mid, workers=info["workers"],
                       block=info["block_id"])
        elif t == "MANAGER_LOST":
            mid = msg["manager"]
            with self._registered:
                info = self.managers.pop(mid, {})
                self.block_managers.get(info.get("block_id"), set()).discard(mid)
                self._registered.notify_all()
            self.last_activity.pop(mid, None)
            lost = []
            with self._lock:
                for eid in msg["task_ids"]:
                    f = self._futs.pop(eid, None)
                    if f is not None:
                        lost.append(f)
            self.lost_managers.append({"manager": mid, "tasks": len(lost),
                                       "reason": msg.get("reason"), "ts": time.time()})
            self._emit(MANAGER, event="lost", manager=mid, workers=info.get("workers", 1),
                       block=info.get("block_id"), reason=msg.get("reason"), tasks=len(lost))
            for f in lost:
                f.set_exception(ManagerLost(f"manager {mid} lost ({msg.get('reason')})",
                                            manager=mid))

    def _fail_all(self, exc):
        with self._lock:
            futs, self._futs = list(self._futs.values()), {}
        for f in futs:
            if not f.done():
                f.set_exception(exc)

    # commands ------------------------------------------------------------
    def command(self, cmd: str, arg=None, timeout: float = 30.0):
        with self._cmd_lock:
            reply = self.cmd_conn.request({"type": "CMD", "cmd": cmd, "arg": arg}, timeout)
        if not reply["ok"]:
            if reply.get("error") == "UnknownManager":
                raise UnknownManager(reply.get("message", ""))
            raise ValueError(reply.get("message", ""))
        return reply["result"]

    def outstanding(self) -> dict[str, int]:
        return self.command("OUTSTANDING")

    def blacklist(self, manager_id: str) -> None:
        self.command("BLACKLIST", manager_id)

    def stats(self) -> dict:
        return self.command("STATS")

    def wait_for_managers(self, n: int, timeout: float = 30.0) -> int:
        """Block until at least ``n`` managers are registered."""
        deadline = time.time() + timeout
        with self._registered:
            while len(self.managers) < n:
                left = deadline - time.time()
                if left <= 0:
                    raise TimeoutError(f"{len(self.managers)} of {n} managers connected")
                self._registered.wait(left)
            return len(self.managers)

    def connected_workers(self) -> int:
        return sum(m["workers"] for m in list(self.managers.values()))

    # blocks and scaling --------------------------------------------------
    @property
    def slots_per_block(self) -> int:
        p = self.provider
        return p.launcher.agents(p.nodes_per_block) * self.workers_per_node

    def _block_event(self, block, old, new):
        self._emit(BLOCK, block=block.block_id, event=new.value,
                   previous=old.value if old else None, reason=block.reason)
        if new is BlockState.FAILED:
            logger.warning("%s: block %s failed (%s); capacity lost", self.label,
                           block.block_id, block.reason)

    def scale_out(self, blocks: int) -> list[str]:
        if self.status is not ExecutorStatus.RUNNING:
            return []
        return [self.provider.submit(self.manager_command()) for _ in range(blocks)]

    def block_snapshot(self, now: float | None = None) -> dict:
        """Per-block view used by the strategy: state and idle age (None if busy)."""
        now = time.time() if now is None else now
        try:
            outstanding = self.outstanding()
        except Exception:
            outstanding = {}
        out = {}
        for bid, block in list(self.provider.blocks.items()):
            mids = [m for m in self.block_managers.get(bid, ()) if m in outstanding]
            idle = None
            if block.state is BlockState.ACTIVE and mids and all(outstanding[m] == 0 for m in mids):
                idle = now - max(self.last_activity.get(m, now) for m in mids)
            out[bid] = {"state": block.state, "managers": mids, "idle_age": idle}
        return out

    def scale_in(self, blocks) -> list[str]:
        """Cancel blocks. An int asks for that many of the longest-idle blocks;
        only blocks whose managers all hold no tasks are removed."""
        if isinstance(blocks, int):
            snap = self.block_snapshot()
            idle = sorted((b for b, s in snap.items() if s["idle_age"] is not None),
                          key=lambda b: -snap[b]["idle_age"])
            candidates = idle[:blocks]
        else:
            candidates = list(blocks)
        removed = []
        for bid in candidates:
            mids = list(self.block_managers.get(bid, ()))
            drained = []
            ok = True
            for m in mids:
                try:
                    if self.command("DRAIN", m):
                        drained.append(m)
                    else:
                        ok = False
                        break
                except UnknownManager:
                    continue
            if not ok:
                for m in drained:
                    try:
                        self.command("UNDRAIN", m)
                    except UnknownManager:
                        pass
                continue
            self.provider.cancel(bid)
            removed.append(bid)
        return removed
