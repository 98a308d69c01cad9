from __future__ import annotations

import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor

from ..errors import AppError, EngineShutdown, TaskError
from ..monitoring import MANAGER
from .base import ExecFuture, ExecutionKernel, Executor, ExecutorStatus


class LocalExecutor(Executor):
    """In-process worker threads with FIFO dispatch, for single-node runs."""

    def __init__(self, label: str = "local", workers: int = 4,
                 kernel: ExecutionKernel | None = None):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        super().__init__(label)
        self.workers = workers
        self.kernel = kernel or ExecutionKernel()
        self._pool: ThreadPoolExecutor | None = None
        self._pending = 0
        self._lock = threading.Lock()

    def start(self, monitor=None):
        super().start(monitor)
        self._pool = ThreadPoolExecutor(self.workers, thread_name_prefix=self.label)
        self._emit(MANAGER, event="registered", manager=self.label, workers=self.workers)

    def submit_task(self, task_id, attempt, app, args, kwargs) -> ExecFuture:
        if self.status is not ExecutorStatus.RUNNING or self._pool is None:
            raise EngineShutdown(f"executor {self.label} is not running")
        fut = ExecFuture(task_id, attempt)
        with self._lock:
            self._pending += 1
            self.submitted += 1
        self._pool.submit(self._run, fut, app, args, kwargs)
        return fut

    def _run(self, fut: ExecFuture, app, args, kwargs):
        name = threading.current_thread().name
        fut.worker = f"{self.label}:{name.rsplit('_', 1)[-1]}"
        fut.started = time.time()
        try:
            value = self.kernel.execute(app, args, kwargs, fut.task_id, fut.attempt)
        except Exception as e:
            if not isinstance(e, TaskError):
                e = AppError.wrap(e, traceback.format_exc())
            fut.finished = time.time()
            self._done()
            fut.set_exception(e)
        else:
            fut.finished = time.time()
            self._done()
            fut.set_result(value)

    def _done(self):
        with self._lock:
            self._pending -= 1

    def pending_count(self) -> int:
        return self._pending

    def shutdown(self):
        if self.status is ExecutorStatus.STOPPED:
            return
        self.status = ExecutorStatus.DRAINING
        if self._pool is not None:
            self._pool.shutdown(wait=True)
        self.status = ExecutorStatus.STOPPED
        self._emit(MANAGER, event="exited", manager=self.label, workers=self.workers)


class ImmediateExecutor(Executor):
    """Runs each task inline inside ``submit_task``.

    Meant for measuring the kernel itself: with no-op apps nearly all time
    spent is graph bookkeeping.
    """

    def __init__(self, label: str = "immediate", kernel: ExecutionKernel | None = None):
        super().__init__(label)
        self.kernel = kernel or ExecutionKernel()

    def start(self, monitor=None):
        super().start(monitor)
        self._emit(MANAGER, event="registered", manager=self.label, workers=1)

    def submit_task(self, task_id, attempt, app, args, kwargs) -> ExecFuture:
        if self.status is not ExecutorStatus.RUNNING:
            raise EngineShutdown(f"executor {self.label} is not running")
        fut = ExecFuture(task_id, attempt)
        fut.worker = f"{self.label}:0"
        self.submitted += 1
        fut.started = time.time()
        try:
            value = self.kernel.execute(app, args, kwargs, task_id, attempt)
        except Exception as e:
            if not isinstance(e, TaskError):
                e = AppError.wrap(e, traceback.format_exc())
            fut.finished = time.time()
            fut.set_exception(e)
        else:
            fut.finished = time.time()
            fut.set_result(value)
        return fut

    def pending_count(self) -> int:
        return 0

    def shutdown(self):
        if self.status is ExecutorStatus.STOPPED:
            return
        self.status = ExecutorStatus.STOPPED
        self._emit(MANAGER, event="exited", manager=self.label, workers=1)
