"""HTEX interchange: brokers task batches between the executor client and managers.

The routing state (:class:`Interchange`) is free of I/O so matching, loss
detection and commands can be exercised directly; :func:`serve` wraps it in a
single-threaded selector loop listening on a task port and a command port.
Run as ``python -m pilotflow.executors.htex.interchange``; the chosen ports
are printed as one JSON line on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import selectors
import sys
import time
from collections import Counter, deque
from dataclasses import dataclass, field

from ...errors import UnknownManager
from ...net import Conn, listen

logger = logging.getLogger(__name__)


@dataclass
class ManagerRecord:
    manager_id: str
    advertised_capacity: int
    workers: int = 1
    block_id: str | None = None
    outstanding: set = field(default_factory=set)
    last_heartbeat: float = 0.0
    blacklisted: bool = False
    draining: bool = False

    @property
    def spare(self) -> int:
        return self.advertised_capacity - len(self.outstanding)


class Interchange:
    """Task queue, manager table and the matching policy."""

    def __init__(self, heartbeat_threshold: float = 6.0, batch_size_max: int = 128,
                 seed: int | None = None, keep_log: bool = False):
        self.heartbeat_threshold = heartbeat_threshold
        self.batch_size_max = batch_size_max
        self.rng = random.Random(seed)
        self.managers: dict[str, ManagerRecord] = {}
        self.queue: deque = deque()
        self.dispatch_counts: Counter = Counter()
        self.dispatch_log: list[tuple[str, list[int]]] | None = [] if keep_log else None
        self.results_forwarded = 0
        self.duplicates_dropped = 0

    def register_manager(self, manager_id: str, capacity: int, now: float, **info) -> ManagerRecord:
        rec = ManagerRecord(manager_id, capacity, last_heartbeat=now,
                            workers=info.get("workers", 1), block_id=info.get("block_id"))
        self.managers[manager_id] = rec
        return rec

    def enqueue(self, tasks) -> None:
        self.queue.extend(tasks)

    def heartbeat(self, manager_id: str, now: float) -> None:
        rec = self.managers.get(manager_id)
        if rec is not None:
            rec.last_heartbeat = now

    def eligible(self, now: float) -> list[ManagerRecord]:
        return [m for m in self.managers.values()
                if not m.blacklisted and not m.draining and m.spare > 0
                and now - m.last_heartbeat <= self.heartbeat_threshold]

    def match(self, now: float | None = None) -> list[tuple[str, list]]:
        """Hand queued tasks to managers with spare capacity.

        Eligible managers are visited in uniformly random order; each receives
        up to ``min(spare, batch_size_max)`` tasks. Tasks leave the queue once.
        """
        now = time.time() if now is None else now
        if not self.queue:
            return []
        out = []
        managers = self.eligible(now)
        self.rng.shuffle(managers)
        for m in managers:
            if not self.queue:
                break
            n = min(m.spare, self.batch_size_max, len(self.queue))
            batch = [self.queue.popleft() for _ in range(n)]
            ids = [t[0] for t in batch]
            m.outstanding.update(ids)
            self.dispatch_counts[m.manager_id] += n
            if self.dispatch_log is not None:
                self.dispatch_log.append((m.manager_id, ids))
            out.append((m.manager_id, batch))
        return out

    def on_results(self, manager_id: str, results: list) -> list:
        """Results to forward: only those the manager actually holds."""
        rec = self.managers.get(manager_id)
        if rec is None:
            self.duplicates_dropped += len(results)
            return []
        keep = []
        for r in results:
            if r[0] in rec.outstanding:
                rec.outstanding.discard(r[0])
                keep.append(r)
            else:
                self.duplicates_dropped += 1
        self.results_forwarded += len(keep)
        return keep

    def remove_manager(self, manager_id: str) -> list[int]:
        rec = self.managers.pop(manager_id, None)
        return sorted(rec.outstanding) if rec else []

    def detect_manager_loss(self, now: float) -> list[tuple[str, list[int]]]:
        """Managers silent for longer than the threshold, with their tasks."""
        lost = [m.manager_id for m in self.managers.values()
                if now - m.last_heartbeat > self.heartbeat_threshold]
        return [(mid, self.remove_manager(mid)) for mid in lost]

    def command(self, cmd: str, arg=None) -> dict:
        if cmd == "OUTSTANDING":
            return {m.manager_id: len(m.outstanding) for m in self.managers.values()}
        if cmd == "MANAGERS":
            return {m.manager_id: {"block_id": m.block_id, "workers": m.workers,
                                   "capacity": m.advertised_capacity,
                                   "outstanding": len(m.outstanding),
                                   "blacklisted": m.blacklisted, "draining": m.draining}
                    for m in self.managers.values()}
        if cmd == "QUEUED":
            return len(self.queue)
        if cmd == "STATS":
            return {"dispatch_counts": dict(self.dispatch_counts),
                    "results_forwarded": self.results_forwarded,
                    "duplicates_dropped": self.duplicates_dropped,
                    "queued": len(self.queue)}
        if cmd in ("BLACKLIST", "DRAIN", "UNDRAIN"):
            rec = self.managers.get(arg)
            if rec is None:
                raise UnknownManager(f"unknown manager {arg!r}")
            if cmd == "BLACKLIST":
                rec.blacklisted = True
                return True
            if cmd == "UNDRAIN":
                rec.draining = False
                return True
            # a manager is only drained while it holds nothing
            if rec.outstanding:
                return False
            rec.draining = True
            return True
        raise ValueError(f"unknown command {cmd!r}")


def serve(ix: Interchange, task_sock, cmd_sock, heartbeat_period: float,
          client_timeout: float = 30.0) -> None:
    """Routing loop. Returns after SHUTDOWN or when the client goes away."""
    sel = selectors.DefaultSelector()
    sel.register(task_sock, selectors.EVENT_READ, "accept-task")
    sel.register(cmd_sock, selectors.EVENT_READ, "accept-cmd")
    client: Conn | None = None
    mconns: dict[str, Conn] = {}
    started = time.time()
    next_check = time.time() + heartbeat_period / 2
    running = True

    def to_client(msg):
        if client is not None:
            client.send(msg)

    def update_interest(c: Conn):
        ev = selectors.EVENT_READ | (selectors.EVENT_WRITE if c.outbuf else 0)
        try:
            sel.modify(c.sock, ev, c)
        except (KeyError, ValueError):
            pass

    def dispatch():
        for mid, batch in ix.match():
            c = mconns.get(mid)
            if c is not None:
                c.send({"type": "TASK_BATCH", "tasks": batch})
                update_interest(c)

    def lose(mid, reason):
        tasks = ix.remove_manager(mid)
        c = mconns.pop(mid, None)
        if c is not None:
            try:
                sel.unregister(c.sock)
            except (KeyError, ValueError):
                pass
            c.close()
        to_client({"type": "MANAGER_LOST", "manager": mid, "task_ids": tasks, "reason": reason})

    def drop(c: Conn):
        nonlocal client, running
        try:
            sel.unregister(c.sock)
        except (KeyError, ValueError):
            pass
        c.close()
        if c.role == "manager" and c.ident in mconns:
            lose(c.ident, "disconnected")
        elif c.role == "client":
            client = None
            running = False

    while running:
        now = time.time()
        timeout = max(0.0, next_check - now)
        for key, mask in sel.select(timeout):
            tag = key.data
            if tag in ("accept-task", "accept-cmd"):
                try:
                    s, addr = key.fileobj.accept()
                except OSError:
                    continue
                c = Conn(s, addr)
                if tag == "accept-cmd":
                    c.role = "command"
                sel.register(s, selectors.EVENT_READ, c)
                continue
            c: Conn = tag
            if mask & selectors.EVENT_WRITE:
                if not c.flush():
                    drop(c)
                    continue
                update_interest(c)
            if not mask & selectors.EVENT_READ:
                continue
            msgs, alive = c.read()
            now = time.time()
            for msg in msgs:
                t = msg["type"]
                if c.role == "command" and t == "CMD":
                    try:
                        result = ix.command(msg["cmd"], msg.get("arg"))
                        reply = {"type": "CMD_REPLY", "ok": True, "result": result}
                    except (UnknownManager, ValueError) as e:
                        reply = {"type": "CMD_REPLY", "ok": False,
                                 "error": type(e).__name__, "message": str(e)}
                    if msg["cmd"] == "SHUTDOWN":
                        for mc in mconns.values():
                            mc.send({"type": "CMD", "cmd": "SHUTDOWN"})
                        reply = {"type": "CMD_REPLY", "ok": True, "result": True}
                        running = False
                    c.send(reply)
                    if msg["cmd"] in ("BLACKLIST", "UNDRAIN"):
                        dispatch()
                elif t == "TASK_BATCH":
                    ix.enqueue(msg["tasks"])
                    dispatch()
                elif t == "RESULT_BATCH":
                    ix.heartbeat(c.ident, now)
                    keep = ix.on_results(c.ident, msg["results"])
                    if keep:
                        to_client({"type": "RESULT_BATCH", "manager": c.ident, "results": keep})
                    dispatch()
                elif t == "HEARTBEAT":
                    if c.role == "manager":
                        ix.heartbeat(c.ident, now)
                        c.send({"type": "HEARTBEAT", "ts": now})
                elif t == "REGISTER":
                    if msg.get("role") == "client":
                        c.role = "client"
                        client = c
                    else:
                        mid = msg["manager_id"]
                        c.role, c.ident = "manager", mid
                        mconns[mid] = c
                        ix.register_manager(mid, int(msg["capacity"]), now,
                                            workers=int(msg.get("workers", 1)),
                                            block_id=msg.get("block_id"))
                        c.send({"type": "HEARTBEAT", "ts": now})
                        to_client({**msg, "type": "REGISTER", "role": "manager"})
                        dispatch()
            if not alive:
                drop(c)
            elif c.outbuf:
                update_interest(c)
        if client is not None and client.outbuf:
            update_interest(client)
        now = time.time()
        if now >= next_check:
            next_check = now + heartbeat_period / 2
            for mid, _tasks in [(m, None) for m in list(ix.managers)]:
                rec = ix.managers[mid]
                if now - rec.last_heartbeat > ix.heartbeat_threshold:
                    lose(mid, "heartbeat timeout")
            if client is None and now - started > client_timeout:
                logger.warning("no client connected; exiting")
                running = False
    for c in list(mconns.values()):
        c.flush()
        c.close()
    if client is not None:
        client.flush()
        client.close()


def main(argv=None):
    p = argparse.ArgumentParser(description="HTEX interchange")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--task-port", type=int, default=0)
    p.add_argument("--command-port", type=int, default=0)
    p.add_argument("--heartbeat-period", type=float, default=2.0)
    p.add_argument("--heartbeat-threshold", type=float, default=6.0)
    p.add_argument("--batch-size-max", type=int, default=128)
    p.add_argument("--seed", type=int, default=None)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    task_sock = listen(args.host, args.task_port)
    cmd_sock = listen(args.host, args.command_port)
    print(json.dumps({"task_port": task_sock.getsockname()[1],
                      "command_port": cmd_sock.getsockname()[1]}), flush=True)
    ix = Interchange(args.heartbeat_threshold, args.batch_size_max, args.seed)
    serve(ix, task_sock, cmd_sock, args.heartbeat_period)


if __name__ == "__main__":
    main()
