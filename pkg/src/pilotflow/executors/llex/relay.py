"""LLEX relay: forwards task frames to idle workers and results back to clients.

The relay keeps no per-task state. It knows which connections are clients,
and for each worker connection a single idle/busy bit. A task frame that
finds no idle worker waits in a transient buffer until one frees. Clients are
identified by a small integer stamped into each task frame; workers echo it
back in the result so the relay can route without remembering anything.

Every forwarded frame has its ``hops`` field incremented, so a task sent by a
client arrives at a worker with ``hops == 2`` and a result arrives at the
client with ``hops == 2``.

Run as ``python -m pilotflow.executors.llex.relay``; ports are printed as one
JSON line on stdout.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import selectors
import sys
from collections import deque

from ...net import Conn, listen

logger = logging.getLogger(__name__)


class Relay:
    def __init__(self, client_sock, worker_sock):
        self.sel = selectors.DefaultSelector()
        self.sel.register(client_sock, selectors.EVENT_READ, "accept-client")
        self.sel.register(worker_sock, selectors.EVENT_READ, "accept-worker")
        self.clients: dict[int, Conn] = {}
        self.ready: deque[Conn] = deque()  # idle workers, least recently used first
        self.buffer: deque[dict] = deque()
        self.workers: set[Conn] = set()
        self._client_ids = itertools.count(1)
        self.forwarded = 0
        self.running = True

    def introspect(self) -> dict:
        return {"task_records": len(self.buffer), "workers": len(self.workers),
                "idle_workers": len(self.ready), "clients": len(self.clients),
                "forwarded": self.forwarded}

    def _interest(self, c: Conn):
        ev = selectors.EVENT_READ | (selectors.EVENT_WRITE if c.outbuf else 0)
        try:
            self.sel.modify(c.sock, ev, c)
        except (KeyError, ValueError):
            pass

    def _send(self, c: Conn, msg: dict):
        msg["hops"] = msg.get("hops", 0) + 1
        c.send(msg)
        self.forwarded += 1
        if c.outbuf:
            self._interest(c)

    def _to_worker(self, msg: dict):
        while self.ready:
            w = self.ready.popleft()
            if w.closed:
                continue
            w.busy = True
            self._send(w, msg)
            return
        self.buffer.append(msg)

    def _worker_free(self, w: Conn):
        if self.buffer:
            self._send(w, self.buffer.popleft())
        else:
            w.busy = False
            self.ready.append(w)

    def _drop(self, c: Conn):
        try:
            self.sel.unregister(c.sock)
        except (KeyError, ValueError):
            pass
        c.close()
        if c.role == "worker":
            # a lost worker is not reported; clients recover by timed retry
            self.workers.discard(c)
            try:
                self.ready.remove(c)
            except ValueError:
                pass
        elif c.role == "client":
            self.clients.pop(c.ident, None)
            if not self.clients:
                self.running = False

    def _on_message(self, c: Conn, msg: dict):
        t = msg["type"]
        if t == "TASK":
            if c.role != "client":
                return
            msg["client"] = c.ident
            self._to_worker(msg)
        elif t == "RESULT":
            if c.role != "worker":
                return
            dest = self.clients.get(msg.get("client"))
            if dest is not None:
                self._send(dest, msg)
            self._worker_free(c)
        elif t == "REGISTER":
            if msg.get("role") == "worker":
                c.role, c.ident = "worker", msg.get("worker_id")
                c.busy = False
                self.workers.add(c)
                self._worker_free(c)
            else:
                c.role, c.ident = "client", next(self._client_ids)
                self.clients[c.ident] = c
                c.send({"type": "REGISTER", "client": c.ident})
        elif t == "CMD":
            cmd = msg.get("cmd")
            if cmd == "INTROSPECT":
                c.send({"type": "CMD_REPLY", "ok": True, "result": self.introspect()})
            elif cmd == "SHUTDOWN":
                c.send({"type": "CMD_REPLY", "ok": True, "result": True})
                self.running = False
            else:
                c.send({"type": "CMD_REPLY", "ok": False, "error": "ValueError",
                        "message": f"unknown command {cmd!r}"})
            self._interest(c)

    def serve(self):
        while self.running:
            for key, mask in self.sel.select(1.0):
                tag = key.data
                if isinstance(tag, str):
                    try:
                        s, addr = key.fileobj.accept()
                    except OSError:
                        continue
                    c = Conn(s, addr)
                    c.busy = False
                    self.sel.register(s, selectors.EVENT_READ, c)
                    continue
                c = tag
                if mask & selectors.EVENT_WRITE:
                    if not c.flush():
                        self._drop(c)
                        continue
                    self._interest(c)
                if not mask & selectors.EVENT_READ:
                    continue
                msgs, alive = c.read()
                for msg in msgs:
                    self._on_message(c, msg)
                if not alive:
                    self._drop(c)
        for c in list(self.workers) + list(self.clients.values()):
            c.flush()
            c.close()


def main(argv=None):
    p = argparse.ArgumentParser(description="LLEX relay")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--client-port", type=int, default=0)
    p.add_argument("--worker-port", type=int, default=0)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    cs = listen(args.host, args.client_port)
    ws = listen(args.host, args.worker_port)
    print(json.dumps({"client_port": cs.getsockname()[1],
                      "worker_port": ws.getsockname()[1]}), flush=True)
    Relay(cs, ws).serve()


if __name__ == "__main__":
    main()
