"""Executor interface and the execution kernel shared by every worker."""

from __future__ import annotations

import abc
import enum
import os
import shutil
import string
import subprocess
import tempfile
import time
import traceback
from concurrent.futures import Future
from typing import Any

from .. import codec
from ..codec import UnixStatus
from ..errors import (AppError, SandboxError, ShellExitError, TaskError,
                      TemplateError, UnknownApp)
from ..tasks import REGISTRY, AppKind, AppRegistry, AppSpec


class ExecutorStatus(enum.Enum):
    STARTING = "starting"
    RUNNING = "running"
    DRAINING = "draining"
    STOPPED = "stopped"


class ExecFuture(Future):
    """Executor-side future; carries where and when the attempt ran."""

    def __init__(self, task_id: int = -1, attempt: int = 0):
        super().__init__()
        self.task_id = task_id
        self.attempt = attempt
        self.started: float | None = None
        self.finished: float | None = None
        self.worker: str | None = None


class Executor(abc.ABC):
    """What the kernel needs from an executor.

    ``submit_task`` must not block on task completion; the returned future may
    be completed from any thread.
    """

    label: str = "executor"
    scalable = False

    def __init__(self, label: str):
        self.label = label
        self.status = ExecutorStatus.STARTING
        self.monitor = None
        self.submitted = 0

    def start(self, monitor=None) -> None:
        self.monitor = monitor
        self.status = ExecutorStatus.RUNNING

    @abc.abstractmethod
    def submit_task(self, task_id: int, attempt: int, app: AppSpec,
                    args: tuple, kwargs: dict) -> ExecFuture:
        ...

    @abc.abstractmethod
    def pending_count(self) -> int:
        """Tasks handed to this executor that have not completed."""

    def scale_out(self, blocks: int) -> list[str]:
        return []

    def scale_in(self, blocks: int | list[str]) -> list[str]:
        return []

    @abc.abstractmethod
    def shutdown(self) -> None:
        ...

    def _emit(self, kind, task_id=-1, ts=None, **detail):
        if self.monitor is not None:
            self.monitor.emit(kind, task_id, ts, executor=self.label, **detail)


class _Formatter(string.Formatter):
    def get_value(self, key, args, kwargs):
        try:
            return super().get_value(key, args, kwargs)
        except (IndexError, KeyError):
            raise TemplateError(f"unbound placeholder {{{key}}}", placeholder=str(key)) from None


_FORMATTER = _Formatter()


def render_command(template: str, args: tuple, kwargs: dict) -> str:
    """Fill ``{0}``/``{name}`` placeholders; ``{{``/``}}`` are literal braces."""
    try:
        return _FORMATTER.vformat(template, tuple(args), kwargs)
    except TemplateError:
        raise
    except (ValueError, AttributeError, TypeError) as e:
        raise TemplateError(f"bad command template: {e}") from None


class ExecutionKernel:
    """Runs one task attempt: native apps by registry lookup, shell apps in a sandbox."""

    def __init__(self, registry: AppRegistry = REGISTRY, sandbox_root: str | None = None):
        self.registry = registry
        self.sandbox_root = sandbox_root or os.path.join(tempfile.gettempdir(), "pilotflow-sandbox")

    def sandbox(self, task_id: int, attempt: int) -> str:
        path = os.path.join(self.sandbox_root, f"task_{task_id}_try_{attempt}")
        try:
            if os.path.exists(path):
                shutil.rmtree(path)
            os.makedirs(path)
        except OSError as e:
            raise SandboxError(f"cannot create sandbox {path}: {e}", path=path) from None
        return path

    def execute(self, app: AppSpec, args: tuple, kwargs: dict,
                task_id: int = 0, attempt: int = 0) -> Any:
        """Return the app's value; raise a :class:`TaskError` on failure."""
        if app.kind is AppKind.NATIVE:
            fn = self.registry.resolve(app.name)
            try:
                return fn(*args, **kwargs)
            except TaskError:
                raise
            except Exception as e:
                raise AppError.wrap(e, traceback.format_exc()) from None
        return self._run_shell(app, args, kwargs, task_id, attempt)

    def _run_shell(self, app, args, kwargs, task_id, attempt) -> UnixStatus:
        cmd = render_command(app.command, args, kwargs)
        workdir = self.sandbox(task_id, attempt)
        stdout = kwargs.get("stdout", app.stdout)
        stderr = kwargs.get("stderr", app.stderr)
        stderr = os.fspath(stderr) if stderr else os.path.join(workdir, "stderr.txt")
        out_fh = open(os.fspath(stdout), "w") if stdout else subprocess.DEVNULL
        err_fh = open(stderr, "w")
        try:
            # environment is inherited unchanged from the hosting process
            status = subprocess.call(cmd, shell=True, cwd=workdir,
                                     stdout=out_fh, stderr=err_fh)
        finally:
            if stdout:
                out_fh.close()
            err_fh.close()
        if status != 0:
            raise ShellExitError(status, stderr)
        return UnixStatus(0)


def run_encoded(kernel: ExecutionKernel, payload: bytes, worker: str) -> bytes:
    """Worker-side entry: decode a task payload, run it, encode the outcome.

    Payload is ``[task_id, attempt, app_wire, args, kwargs]``; the reply is
    ``{"ok": bool, "value"|"error": ..., "start": t, "end": t, "worker": id}``.
    """
    start = time.time()
    try:
        task_id, attempt, app_w, args, kwargs = codec.decode(payload)
        value = kernel.execute(AppSpec.from_wire(app_w), tuple(args), kwargs, task_id, attempt)
        reply = {"ok": True, "value": value}
        try:
            body = codec.encode({**reply, "start": start, "end": time.time(), "worker": worker})
            return body
        except Exception as e:
            reply = {"ok": False, "error": AppError(f"unencodable result: {e}")}
    except TaskError as e:
        reply = {"ok": False, "error": e}
    except Exception as e:
        reply = {"ok": False, "error": AppError.wrap(e, traceback.format_exc())}
    reply.update(start=start, end=time.time(), worker=worker)
    return codec.encode(reply)


def encode_task(task_id: int, attempt: int, app: AppSpec, args, kwargs) -> bytes:
    return codec.encode([task_id, attempt, app.to_wire(), list(args), dict(kwargs)])


def complete_from_reply(fut: ExecFuture, reply: bytes | dict) -> None:
    """Resolve an executor future from a worker reply (bytes or decoded map)."""
    if isinstance(reply, (bytes, bytearray)):
        reply = codec.decode(reply)
    fut.started = reply.get("start")
    fut.finished = reply.get("end")
    fut.worker = reply.get("worker")
    if fut.done():
        return
    try:
        if reply["ok"]:
            fut.set_result(reply.get("value"))
        else:
            fut.set_exception(reply["error"])
    except Exception:  # InvalidStateError on a racing duplicate
        pass


__all__ = [
    "Executor", "ExecutorStatus", "ExecFuture", "ExecutionKernel", "render_command",
    "run_encoded", "encode_task", "complete_from_reply", "UnknownApp",
]
