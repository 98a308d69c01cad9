"""A minimal fork server for starting agents without interpreter start-up cost.

The server process imports the modules it is asked to preload, then reads
one JSON request per line on stdin::

    {"module": "pilotflow.executors.htex.manager", "args": [...], "env": {...}, "log": path}

and answers ``{"pid": N}`` (or ``{"error": msg}``) on stdout. The child runs
``module.main(args)`` in a new session. When a child exits the server writes
``{"exit": N, "code": status}``. The server exits when stdin closes.
"""

from __future__ import annotations

import importlib
import json
import os
import selectors
import subprocess
import sys
import threading


def _child(req: dict, out_fd: int, in_fd: int):
    try:
        os.setsid()
        os.close(out_fd)
        os.close(in_fd)
        log = req.get("log")
        fd = (os.open(log, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644) if log
              else os.open(os.devnull, os.O_WRONLY))
        os.dup2(fd, 1)
        os.dup2(fd, 2)
        os.close(fd)
        devnull = os.open(os.devnull, os.O_RDONLY)
        os.dup2(devnull, 0)
        os.close(devnull)
        os.environ.update(req.get("env") or {})
        sys.argv = [req["module"], *req.get("args", [])]
        code = importlib.import_module(req["module"]).main(req.get("args", []))
        code = code if isinstance(code, int) else 0
    except SystemExit as e:
        code = e.code if isinstance(e.code, int) else (0 if e.code is None else 1)
    except BaseException:
        import traceback
        traceback.print_exc()
        code = 1
    try:
        sys.stdout.flush()
        sys.stderr.flush()
    finally:
        os._exit(code)


def serve(preload) -> None:
    for m in preload:
        importlib.import_module(m)
    in_fd, out_fd = sys.stdin.fileno(), sys.stdout.fileno()
    os.set_blocking(in_fd, False)
    sel = selectors.DefaultSelector()
    sel.register(in_fd, selectors.EVENT_READ)
    buf = b""
    children: set[int] = set()

    def write(obj):
        os.write(out_fd, (json.dumps(obj) + "\n").encode())

    while True:
        events = sel.select(0.02)
        if events:
            try:
                data = os.read(in_fd, 1 << 16)
            except BlockingIOError:
                data = None
            if data == b"":
                return
            if data:
                buf += data
                while b"\n" in buf:
                    line, buf = buf.split(b"\n", 1)
                    try:
                        req = json.loads(line)
                        pid = os.fork()
                    except (ValueError, OSError) as e:
                        write({"error": str(e)})
                        continue
                    if pid == 0:
                        _child(req, out_fd, in_fd)
                    children.add(pid)
                    write({"pid": pid})
        while children:
            try:
                pid, status = os.waitpid(-1, os.WNOHANG)
            except ChildProcessError:
                break
            if pid == 0:
                break
            children.discard(pid)
            write({"exit": pid, "code": os.waitstatus_to_exitcode(status)})


class ForkServer:
    """Client handle; one server process, started lazily."""

    def __init__(self, preload):
        self.preload = list(preload)
        self.proc: subprocess.Popen | None = None
        self._lock = threading.Lock()
        self._cv = threading.Condition()
        self._replies: list[dict] = []
        self.exit_codes: dict[int, int] = {}

    def _ensure(self):
        if self.proc is not None and self.proc.poll() is None:
            return
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "pilotflow.forkserver", *self.preload],
            stdin=subprocess.PIPE, stdout=subprocess.PIPE, start_new_session=True)
        threading.Thread(target=self._read, args=(self.proc,), daemon=True,
                         name="forkserver-reader").start()

    def _read(self, proc):
        for line in proc.stdout:
            msg = json.loads(line)
            with self._cv:
                if "exit" in msg:
                    self.exit_codes[msg["exit"]] = msg["code"]
                else:
                    self._replies.append(msg)
                self._cv.notify_all()
        with self._cv:
            self._replies.append({"error": "fork server exited"})
            self._cv.notify_all()

    def spawn(self, module: str, args, env: dict, log: str | None = None) -> int:
        with self._lock:
            self._ensure()
            req = json.dumps({"module": module, "args": list(args), "env": env, "log": log})
            self.proc.stdin.write(req.encode() + b"\n")
            self.proc.stdin.flush()
            with self._cv:
                while not self._replies:
                    self._cv.wait()
                reply = self._replies.pop(0)
        if "error" in reply:
            raise OSError(reply["error"])
        return reply["pid"]

    def wait_exit(self, pid: int, timeout: float | None) -> int | None:
        with self._cv:
            self._cv.wait_for(lambda: pid in self.exit_codes, timeout)
            return self.exit_codes.get(pid)

    def close(self):
        if self.proc is not None:
            self.proc.stdin.close()
            self.proc.wait()


class ForkedAgent:
    """Popen-like handle for a fork-server child."""

    def __init__(self, server: ForkServer, pid: int):
        self.server = server
        self.pid = pid

    def poll(self):
        return self.server.exit_codes.get(self.pid)

    def wait(self, timeout=None):
        code = self.server.wait_exit(self.pid, timeout)
        if code is None:
            raise subprocess.TimeoutExpired(str(self.pid), timeout)
        return code


if __name__ == "__main__":
    serve(sys.argv[1:])
