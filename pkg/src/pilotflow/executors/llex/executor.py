"""LLEX client side: replication, first-result-wins dedup and timed retries.

Apps run through this executor must be idempotent: with replication or
timed retries the same task may execute more than once, and only the first
outcome to arrive is kept.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import os
import subprocess
import sys
import tempfile
import threading
import time
from collections import Counter
from dataclasses import dataclass, field

from ...errors import ConfigError, EngineShutdown, LlexTimeout
from ...net import BlockingConn
from ...providers import ExecutionProvider, LauncherSpec, LocalChannel, LocalProvider
from ..base import ExecFuture, Executor, ExecutorStatus, complete_from_reply, encode_task

logger = logging.getLogger(__name__)


@dataclass
class _Live:
    fut: ExecFuture
    payload: bytes
    retries_left: int
    attempts: list = field(default_factory=list)
    round: int = 0


class LowLatencyExecutor(Executor):
    """Fixed pool of workers behind a stateless relay."""

    def __init__(self, label: str = "llex", workers: int = 1, replication_factor: int = 1,
                 task_timeout: float | None = None, max_timed_retries: int = 0,
                 provider: ExecutionProvider | None = None, address: str = "127.0.0.1",
                 sandbox_root: str | None = None, log_dir: str | None = None):
        super().__init__(label)
        if replication_factor < 1:
            raise ConfigError("replication_factor", "must be >= 1")
        if max_timed_retries < 0:
            raise ConfigError("max_timed_retries", "must be >= 0")
        if task_timeout is not None and task_timeout <= 0:
            raise ConfigError("task_timeout", "must be positive")
        if max_timed_retries and task_timeout is None:
            raise ConfigError("task_timeout", "timed retries need a task_timeout")
        if workers < 0:
            raise ConfigError("workers", "must be >= 0")
        self.workers = workers
        self.replication_factor = replication_factor
        self.task_timeout = task_timeout
        self.max_timed_retries = max_timed_retries
        self.dedup_window = 2 * task_timeout if task_timeout else 60.0
        self.provider = provider or LocalProvider(
            init_blocks=1 if workers else 0, max_blocks=1,
            launcher=LauncherSpec("per_node", max(workers, 1)))
        self.address = address
        self.sandbox_root = sandbox_root
        self.log_dir = log_dir or tempfile.mkdtemp(prefix=f"pilotflow-{label}-")
        self.provider.log_dir = self.provider.log_dir or self.log_dir

        self._live: dict[int, _Live] = {}
        self._owner: dict[int, int] = {}  # attempt id -> logical id, for dedup
        self._lids = itertools.count()
        self._aids = itertools.count()
        self._lock = threading.Lock()
        self._timers: list = []
        self._wake = threading.Condition(self._lock)
        self._extra: list[subprocess.Popen] = []
        self.duplicates_discarded = 0
        self.surfaced = 0
        self.timed_retries = 0
        self.hops = Counter()
        self.relay_proc: subprocess.Popen | None = None

    # lifecycle -----------------------------------------------------------
    def start(self, monitor=None):
        super().start(monitor)
        self.status = ExecutorStatus.STARTING
        err = open(os.path.join(self.log_dir, "relay.log"), "ab")
        self.relay_proc = subprocess.Popen(
            [sys.executable, "-m", "pilotflow.executors.llex.relay", "--host", self.address],
            stdout=subprocess.PIPE, stderr=err, stdin=subprocess.DEVNULL)
        err.close()
        line = self.relay_proc.stdout.readline()
        if not line:
            raise EngineShutdown(f"relay for {self.label} failed to start")
        self.ports = json.loads(line)
        self.conn = BlockingConn.connect(self.address, self.ports["client_port"])
        self.conn.send({"type": "REGISTER", "role": "client"})
        hello = self.conn.recv(10)
        self.client_id = hello["client"]
        threading.Thread(target=self._receive, name=f"{self.label}-recv", daemon=True).start()
        threading.Thread(target=self._timer_loop, name=f"{self.label}-timer", daemon=True).start()
        self.status = ExecutorStatus.RUNNING
        for _ in range(self.provider.init_blocks):
            self.provider.submit(self.worker_command())

    def worker_command(self, drop_frames: bool = False) -> list[str]:
        cmd = [sys.executable, "-m", "pilotflow.executors.llex.worker", "--host", self.address,
               "--port", str(self.ports["worker_port"]), "--prefix", self.label]
        if drop_frames:
            cmd.append("--drop-frames")
        if self.sandbox_root:
            cmd += ["--sandbox-root", self.sandbox_root]
        return cmd

    def spawn_worker(self, drop_frames: bool = False, worker_id: str | None = None):
        """Start one extra worker outside any block (used for fault injection)."""
        cmd = self.worker_command(drop_frames)
        if worker_id:
            cmd += ["--worker-id", worker_id]
        proc = LocalChannel().spawn(cmd, {})
        self._extra.append(proc)
        return proc

    def introspect(self) -> dict:
        """Ask the relay what it is holding (a fresh connection per call)."""
        c = BlockingConn.connect(self.address, self.ports["client_port"])
        try:
            reply = c.request({"type": "CMD", "cmd": "INTROSPECT"}, timeout=10)
        finally:
            c.close()
        return reply["result"]

    def wait_for_workers(self, n: int, timeout: float = 30.0) -> int:
        deadline = time.time() + timeout
        while True:
            got = self.introspect()["workers"]
            if got >= n:
                return got
            if time.time() > deadline:
                raise TimeoutError(f"{got} of {n} llex workers connected")
            time.sleep(0.02)

    def shutdown(self):
        if self.status is ExecutorStatus.STOPPED:
            return
        self.status = ExecutorStatus.DRAINING
        try:
            self.conn.close()
        except Exception:
            pass
        if self.relay_proc is not None:
            try:
                self.relay_proc.wait(5)
            except subprocess.TimeoutExpired:
                self.relay_proc.kill()
                self.relay_proc.wait()
            self.relay_proc.stdout.close()
        self.provider.shutdown()
        for p in self._extra:
            if p.poll() is None:
                p.kill()
            p.wait()
        with self._wake:
            live, self._live = list(self._live.values()), {}
            self._wake.notify_all()
        for rec in live:
            if not rec.fut.done():
                rec.fut.set_exception(EngineShutdown(f"executor {self.label} shut down"))
        self.status = ExecutorStatus.STOPPED

    # task flow -----------------------------------------------------------
    def submit_task(self, task_id, attempt, app, args, kwargs) -> ExecFuture:
        if self.status is not ExecutorStatus.RUNNING:
            raise EngineShutdown(f"executor {self.label} is not running")
        fut = ExecFuture(task_id, attempt)
        rec = _Live(fut, encode_task(task_id, attempt, app, args, kwargs), self.max_timed_retries)
        lid = next(self._lids)
        with self._wake:
            self._live[lid] = rec
            self.submitted += 1
        self._send_round(lid, rec)
        return fut

    def _send_round(self, lid: int, rec: _Live):
        frames = []
        with self._wake:
            for _ in range(self.replication_factor):
                aid = next(self._aids)
                self._owner[aid] = lid
                rec.attempts.append(aid)
                frames.append({"type": "TASK", "id": aid, "payload": rec.payload, "hops": 1})
            if self.task_timeout:
                heapq.heappush(self._timers, (time.time() + self.task_timeout, 0, lid, rec.round))
                self._wake.notify()
        for f in frames:
            self.conn.send(f)

    def pending_count(self) -> int:
        return len(self._live)

    def _receive(self):
        while True:
            try:
                msgs = self.conn.recv_many(None)
            except OSError:
                msgs = None
            if msgs is None:
                return
            for msg in msgs:
                if msg["type"] == "RESULT":
                    self._on_result(msg)

    def _on_result(self, msg):
        aid = msg["id"]
        self.hops[("task", msg.get("task_hops"))] += 1
        self.hops[("result", msg.get("hops"))] += 1
        with self._wake:
            lid = self._owner.get(aid)
            rec = self._live.pop(lid, None) if lid is not None else None
            if rec is None:
                self.duplicates_discarded += 1
                return
            self.surfaced += 1
            self._retire(rec)
        complete_from_reply(rec.fut, msg["reply"])

    def _retire(self, rec: _Live):
        # remaining replicas may still answer; remember them for a while only
        heapq.heappush(self._timers, (time.time() + self.dedup_window, 1, rec.attempts, None))
        self._wake.notify()

    def _timer_loop(self):
        with self._wake:
            while self.status is not ExecutorStatus.STOPPED:
                now = time.time()
                if not self._timers:
                    self._wake.wait(1.0)
                    continue
                when = self._timers[0][0]
                if when > now:
                    self._wake.wait(when - now)
                    continue
                _, kind, key, rnd = heapq.heappop(self._timers)
                if kind == 1:
                    for aid in key:
                        self._owner.pop(aid, None)
                    continue
                rec = self._live.get(key)
                if rec is None or rec.round != rnd:
                    continue
                if rec.retries_left > 0:
                    rec.retries_left -= 1
                    rec.round += 1
                    self.timed_retries += 1
                    self._wake.release()
                    try:
                        self._send_round(key, rec)
                    except OSError:
                        pass
                    finally:
                        self._wake.acquire()
                    continue
                del self._live[key]
                self._retire(rec)
                rounds = rec.round + 1
                self._wake.release()
                try:
                    rec.fut.set_exception(LlexTimeout(
                        f"no result after {rounds} round(s) of {self.task_timeout}s",
                        timeout=self.task_timeout, rounds=rounds))
                finally:
                    self._wake.acquire()
