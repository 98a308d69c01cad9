"""LLEX worker: connects straight to the relay and runs one task at a time."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import uuid

from ...net import BlockingConn
from ..base import ExecutionKernel, run_encoded

logger = logging.getLogger(__name__)


def serve(host: str, port: int, worker_id: str, drop_frames: bool = False,
          sandbox_root: str | None = None) -> int:
    """Run until the relay goes away.

    With ``drop_frames`` the worker swallows every task frame without
    answering; it stands in for a node that silently loses messages.
    """
    kernel = ExecutionKernel(sandbox_root=sandbox_root)
    conn = BlockingConn.connect(host, port)
    conn.send({"type": "REGISTER", "role": "worker", "worker_id": worker_id,
               "pid": os.getpid()})
    while True:
        try:
            msg = conn.recv(None)
        except OSError:
            msg = None
        if msg is None:
            return 0
        if msg["type"] != "TASK" or drop_frames:
            continue
        reply = run_encoded(kernel, msg["payload"], worker_id)
        conn.send({"type": "RESULT", "id": msg["id"], "client": msg["client"],
                   "reply": reply, "task_hops": msg.get("hops", 0), "hops": 1})


def main(argv=None):
    p = argparse.ArgumentParser(description="LLEX worker")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--worker-id", default=None)
    p.add_argument("--prefix", default="llex")
    p.add_argument("--drop-frames", action="store_true")
    p.add_argument("--sandbox-root", default=None)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    wid = args.worker_id
    if wid is None:
        block = os.environ.get("PILOTFLOW_BLOCK_ID")
        idx = os.environ.get("PILOTFLOW_AGENT_INDEX")
        wid = f"{args.prefix}-{block}-{idx}" if block is not None and idx is not None else uuid.uuid4().hex[:12]
    sys.exit(serve(args.host, args.port, wid, args.drop_frames, args.sandbox_root))


if __name__ == "__main__":
    main()
