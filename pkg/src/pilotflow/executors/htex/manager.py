"""HTEX manager: one pilot agent per node.

The manager forks ``workers`` worker processes before it opens any socket or
thread, then registers with the interchange. Three threads run afterwards:

* receive: TASK_BATCH frames go onto the shared task queue, interchange
  heartbeats refresh the liveness clock, SHUTDOWN ends the process;
* results: drains the worker result queue and ships RESULT_BATCH frames;
* heartbeat: sends HEARTBEAT every period, exits when the interchange has
  been silent for longer than the threshold, and exits if a worker died.

Exiting always kills the workers first.
"""

from __future__ import annotations

import argparse
import ctypes
import encodings.idna  # noqa: F401  imported lazily by socket name resolution
import logging
import multiprocessing as mp
import multiprocessing.popen_fork  # noqa: F401  warm imports for fork-server starts
import multiprocessing.queues  # noqa: F401
import multiprocessing.synchronize  # noqa: F401
import os
import signal
import sys
import threading
import time
import uuid

from ...net import BlockingConn
from ..base import ExecutionKernel, run_encoded

logger = logging.getLogger(__name__)

PR_SET_PDEATHSIG = 1
RESULT_BATCH_MAX = 256


try:
    _LIBC = ctypes.CDLL(None, use_errno=True)
except OSError:
    _LIBC = None


def _die_with_parent():
    try:
        _LIBC.prctl(PR_SET_PDEATHSIG, signal.SIGKILL)
    except AttributeError:
        pass


def worker_main(worker_id: str, tasks, results, sandbox_root: str | None):
    """Worker loop: one task at a time until the ``None`` sentinel."""
    _die_with_parent()
    signal.signal(signal.SIGINT, signal.SIG_IGN)
    kernel = ExecutionKernel(sandbox_root=sandbox_root)
    while True:
        item = tasks.get()
        if item is None:
            return
        tid, payload = item
        results.put((tid, run_encoded(kernel, payload, worker_id)))


class Manager:
    def __init__(self, host: str, port: int, workers: int = 1, prefetch: int = 0,
                 heartbeat_period: float = 2.0, heartbeat_threshold: float = 6.0,
                 manager_id: str | None = None, block_id: str | None = None,
                 sandbox_root: str | None = None):
        self.host, self.port = host, port
        self.workers = workers
        self.prefetch = prefetch
        self.heartbeat_period = heartbeat_period
        self.heartbeat_threshold = heartbeat_threshold
        self.manager_id = manager_id or uuid.uuid4().hex[:12]
        self.block_id = block_id
        self.sandbox_root = sandbox_root
        self.last_seen = time.time()
        self.procs: list = []
        self._exit = threading.Event()

    def spawn_workers(self):
        ctx = mp.get_context("fork")
        self.task_q = ctx.SimpleQueue()
        self.result_q = ctx.SimpleQueue()
        for i in range(self.workers):
            p = ctx.Process(target=worker_main, name=f"worker-{i}",
                            args=(f"{self.manager_id}:{i}", self.task_q, self.result_q,
                                  self.sandbox_root))
            p.start()
            self.procs.append(p)

    def run(self) -> int:
        self.spawn_workers()
        try:
            self.conn = BlockingConn.connect(self.host, self.port, timeout=self.heartbeat_threshold)
        except OSError as e:
            logger.error("cannot reach interchange: %s", e)
            self.kill_workers()
            return 1
        self.conn.send({"type": "REGISTER", "role": "manager", "manager_id": self.manager_id,
                        "capacity": self.workers + self.prefetch, "workers": self.workers,
                        "block_id": self.block_id, "pid": os.getpid(),
                        "hostname": os.uname().nodename})
        self.last_seen = time.time()
        for target in (self._receive, self._ship_results):
            threading.Thread(target=target, daemon=True).start()
        code = self._heartbeat()
        self.kill_workers()
        return code

    def _receive(self):
        put = self.task_q.put
        while True:
            try:
                msgs = self.conn.recv_many(None)
            except OSError:
                msgs = None
            if msgs is None:
                logger.warning("interchange closed the connection")
                self._exit.set()
                return
            self.last_seen = time.time()
            for msg in msgs:
                t = msg["type"]
                if t == "TASK_BATCH":
                    for tid, payload in msg["tasks"]:
                        put((tid, payload))
                elif t == "CMD" and msg.get("cmd") == "SHUTDOWN":
                    self._exit.set()
                    return

    def _ship_results(self):
        get, empty = self.result_q.get, self.result_q.empty
        while True:
            batch = [get()]
            while len(batch) < RESULT_BATCH_MAX and not empty():
                batch.append(get())
            try:
                self.conn.send({"type": "RESULT_BATCH", "results": batch})
            except OSError:
                self._exit.set()
                return

    def _heartbeat(self) -> int:
        tick = min(self.heartbeat_period, 0.1)
        next_beat = 0.0
        while not self._exit.wait(tick):
            now = time.time()
            if now - self.last_seen > self.heartbeat_threshold:
                logger.warning("no interchange heartbeat for %.1fs; exiting", now - self.last_seen)
                return 2
            if not all(p.is_alive() for p in self.procs):
                logger.error("a worker died; exiting")
                return 3
            if now >= next_beat:
                next_beat = now + self.heartbeat_period
                try:
                    self.conn.send({"type": "HEARTBEAT", "ts": now})
                except OSError:
                    return 2
        return 0

    def kill_workers(self):
        for p in self.procs:
            if p.is_alive():
                try:
                    os.kill(p.pid, signal.SIGKILL)
                except ProcessLookupError:
                    pass
        for p in self.procs:
            p.join(timeout=1)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="HTEX manager")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--prefetch", type=int, default=0)
    p.add_argument("--heartbeat-period", type=float, default=2.0)
    p.add_argument("--heartbeat-threshold", type=float, default=6.0)
    p.add_argument("--manager-id", default=None)
    p.add_argument("--block-id", default=None)
    p.add_argument("--sandbox-root", default=None)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s manager %(levelname)s %(message)s")
    mgr = Manager(args.host, args.port, args.workers, args.prefetch, args.heartbeat_period,
                  args.heartbeat_threshold, args.manager_id,
                  args.block_id or os.environ.get("PILOTFLOW_BLOCK_ID"), args.sandbox_root)
    code = mgr.run()
    sys.stdout.flush()
    os._exit(code)


if __name__ == "__main__":
    main()
