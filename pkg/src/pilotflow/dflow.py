"""The dataflow kernel: dynamic task graph, dispatch, retries, memoization.

All graph state is owned by one event-loop thread. ``submit`` (any thread)
and executor completions (executor threads) only enqueue events, so graph
bookkeeping is lock-free and costs O(1) per task plus O(1) per edge.
"""

from __future__ import annotations

import heapq
import logging
import os
import queue
import random
import threading
import time
from collections import Counter
from typing import Any, Iterable, Sequence

from .errors import (ConfigError, DependencyError, EngineShutdown, OutputMissing,
                     TaskError, TaskTimeout, UnknownApp, UnknownExecutor)
from .executors.base import ExecFuture, Executor
from .memo import CheckpointStore, MemoTable, load_checkpoints
from .monitoring import DISPATCH, STATE, Monitor
from .tasks import (REGISTRY, App, AppFuture, AppKind, AppRegistry, AppSpec,
                    DataFuture, TaskRecord, TaskState, find_futures, memo_key,
                    set_current_kernel, substitute)

logger = logging.getLogger(__name__)

S = TaskState
_SUBMIT, _DONE, _CALL, _STOP = range(4)


class DataFlowKernel:
    """Builds the task graph from submitted apps and drives it to completion.

    Parameters mirror the run configuration: ``retries`` is the default retry
    budget per task, ``memoize`` the default per-task cache flag,
    ``checkpoint_files`` are loaded into the memo table at start and
    ``checkpoint_path`` receives one record per successful task. Either
    checkpoint option turns memoization on for tasks that do not say otherwise.
    """

    def __init__(
        self,
        executors: Sequence[Executor],
        *,
        retries: int = 0,
        memoize: bool = False,
        checkpoint_files: Iterable[str] = (),
        checkpoint_path: str | None = None,
        monitor: Monitor | None = None,
        seed: int | None = None,
        task_timeout: float | None = None,
        registry: AppRegistry = REGISTRY,
        staging_dir: str | None = None,
        strategy=None,
    ):
        if not executors:
            raise ConfigError("executors", "at least one executor is required")
        labels = [e.label for e in executors]
        dup = [k for k, n in Counter(labels).items() if n > 1]
        if dup:
            raise ConfigError("executors.label", f"duplicate executor label {dup[0]!r}")
        if retries < 0:
            raise ConfigError("retries", "must be >= 0")
        self.executors: dict[str, Executor] = {e.label: e for e in executors}
        self._labels = sorted(self.executors)
        self.seed = seed if seed is not None else random.SystemRandom().randrange(2**32)
        self.rng = random.Random(self.seed)
        self.retries = retries
        self.memoize = memoize
        self.task_timeout = task_timeout
        self.registry = registry
        self.monitor = monitor or Monitor(seed=self.seed)
        if self.monitor.seed is None:
            self.monitor.seed = self.seed
        logger.info("run %s seed %s", self.monitor.run_id, self.seed)

        self.memo = MemoTable()
        self._checkpointing = bool(checkpoint_path or checkpoint_files)
        if checkpoint_files:
            self.memo.update(load_checkpoints(checkpoint_files))
        self.checkpoint = CheckpointStore(checkpoint_path) if checkpoint_path else None

        self.tasks: dict[int, TaskRecord] = {}
        self.forward_edges: dict[int, list[int]] = {}
        self.unresolved: dict[int, int] = {}
        self.assignments: list[tuple[int, str]] = []
        self.counts = {"succeeded": 0, "failed": 0, "memo_hits": 0}
        self.bookkeeping_time = 0.0  # CPU seconds of the loop thread spent handling events

        self._events: queue.SimpleQueue = queue.SimpleQueue()
        self._id_lock = threading.RLock()
        self._next_id = 0
        self._submitted = 0
        self._terminal = 0
        self._done_cv = threading.Condition()
        self._deadlines: list[tuple[float, int, int]] = []
        self._closed = False

        from .data import DataManager
        self.data_manager = DataManager(self, staging_dir)

        for ex in executors:
            if ex.status.value == "starting":
                ex.start(self.monitor)
            else:
                ex.monitor = self.monitor
        self._loop = threading.Thread(target=self._run_loop, name="dfk-loop", daemon=True)
        self._loop.start()
        self.strategy = strategy
        if strategy is not None:
            strategy.start(self)

    # context management ---------------------------------------------------
    def __enter__(self):
        set_current_kernel(self)
        return self

    def __exit__(self, *exc):
        try:
            if exc[0] is None:
                self.wait_all()
        finally:
            self.shutdown()
            set_current_kernel(None)

    # submission -----------------------------------------------------------
    def submit(self, app: App | AppSpec, args: Sequence = (), kwargs: dict | None = None,
               executor: str | None = None, memoize: bool | None = None,
               retries: int | None = None) -> AppFuture:
        """Register a task; returns its future without waiting for anything."""
        if self._closed:
            raise EngineShutdown("kernel is shut down")
        kwargs = dict(kwargs or {})
        if isinstance(app, App):
            spec = app.spec
            executor = executor or app.executors
            if memoize is None:
                memoize = app.cache
        else:
            spec = app
        if spec.kind is AppKind.NATIVE and spec.name not in self.registry:
            raise UnknownApp(f"app {spec.name!r} is not registered", name=spec.name)
        if memoize is None:
            memoize = self.memoize or self._checkpointing
        if spec.kind is AppKind.SHELL:
            for key in ("stdout", "stderr"):
                if kwargs.get(key):
                    kwargs[key] = os.path.abspath(os.fspath(kwargs[key]))
        args = tuple(args)
        outputs = self.data_manager.claim_outputs(kwargs)
        with self._id_lock:
            if self.data_manager.needs_staging(spec, args, kwargs):
                executor = executor or self._choose_executor()
                args, kwargs = self.data_manager.resolve_files(args, kwargs, executor)
            deps = {f.task_id for f in find_futures(args) + find_futures(kwargs)}
            tid = self._next_id
            self._next_id += 1
            fut = AppFuture(tid)
            rec = TaskRecord(
                task_id=tid, app=spec, args=args, kwargs=kwargs, depends_on=deps,
                future=fut, retries_left=self.retries if retries is None else retries,
                executor_hint=executor, memoize=memoize, submit_time=time.time(),
            )
            rec.outputs = [DataFuture(fut, f) for f in outputs]
            fut.outputs = rec.outputs
            self._submitted += 1
            self._events.put((_SUBMIT, rec))
        return fut

    def _choose_executor(self) -> str:
        if len(self._labels) == 1:
            return self._labels[0]
        return self.rng.choice(self._labels)

    # event loop -------------------------------------------------------------
    def _run_loop(self):
        get = self._events.get
        while True:
            timeout = None
            if self._deadlines:
                timeout = max(0.0, self._deadlines[0][0] - time.time())
            try:
                ev = get(timeout=timeout)
            except queue.Empty:
                self._expire_deadlines()
                continue
            t0 = time.thread_time()
            kind = ev[0]
            try:
                if kind == _SUBMIT:
                    self._on_submit(ev[1])
                elif kind == _DONE:
                    self.handle_completion(ev[1], ev[2], ev[3])
                elif kind == _CALL:
                    ev[1]()
                else:
                    break
            except Exception:
                logger.exception("kernel event %r failed", ev[:2])
            self.bookkeeping_time += time.thread_time() - t0
            if self._deadlines:
                self._expire_deadlines()

    def call_soon(self, fn) -> None:
        """Run ``fn`` on the kernel loop thread."""
        self._events.put((_CALL, fn))

    def _state(self, rec: TaskRecord, new: TaskState, ts: float | None = None, **detail):
        ts = time.time() if ts is None else ts
        old = rec.set_state(new, ts)
        if self.monitor.sinks:
            self.monitor.emit(STATE, rec.task_id, ts, **{"from": old.value, "to": new.value},
                              **detail)

    def _on_submit(self, rec: TaskRecord):
        tid = rec.task_id
        self.tasks[tid] = rec
        if self.monitor.sinks:
            self.monitor.emit(STATE, tid, rec.submit_time, **{"from": None, "to": "pending"},
                              app=rec.app.name, deps=sorted(rec.depends_on))
        pending = 0
        failed_dep = None
        for d in rec.depends_on:
            dep = self.tasks[d]
            if dep.state is S.SUCCEEDED or dep.state is S.MEMO_HIT:
                continue
            if dep.state is S.FAILED:
                failed_dep = d
                continue
            self.forward_edges.setdefault(d, []).append(tid)
            pending += 1
        self.unresolved[tid] = pending
        if failed_dep is not None:
            self._fail_dependency(rec, failed_dep)
        elif pending == 0:
            self._ready(rec)

    def on_dependency_resolved(self, tid: int, dep_id: int, ok: bool):
        rec = self.tasks[tid]
        if rec.state is not S.PENDING:
            return
        if not ok:
            self._fail_dependency(rec, dep_id)
            return
        self.unresolved[tid] -= 1
        if self.unresolved[tid] == 0:
            self._ready(rec)

    def _ready(self, rec: TaskRecord):
        """All dependencies succeeded: substitute values, consult memo, dispatch."""
        bad = [f for f in find_futures(rec.args) + find_futures(rec.kwargs) if f.exception()]
        if bad:
            self._fail_dependency(rec, bad[0].task_id, bad[0].exception())
            return
        if rec.depends_on:
            rec.args = substitute(rec.args)
            rec.kwargs = substitute(rec.kwargs)
        if rec.memoize:
            try:
                rec.memo_key = memo_key(rec.app, rec.args, rec.kwargs)
            except Exception as e:
                logger.warning("task %d not memoizable: %s", rec.task_id, e)
            else:
                hit, value = self.memo.lookup(rec.memo_key)
                if hit:
                    rec.complete_time = time.time()
                    self._state(rec, S.MEMO_HIT)
                    self.counts["memo_hits"] += 1
                    self._resolve_outputs(rec)
                    rec.future.set_result(value)
                    self._finish(rec, True)
                    return
        self._state(rec, S.LAUNCHABLE)
        self.dispatch(rec)

    def dispatch(self, rec: TaskRecord):
        label = rec.executor_hint or self._choose_executor()
        ex = self.executors.get(label)
        if ex is None:
            self._state(rec, S.FAILED)
            self._fail_final(rec, UnknownExecutor(f"no executor labelled {label!r}", label=label))
            return
        attempt = rec.launches
        rec.launches += 1
        rec.executor = label
        rec.launch_time = time.time()
        self.assignments.append((rec.task_id, label))
        self._state(rec, S.LAUNCHED, rec.launch_time, executor=label, attempt=attempt)
        if self.monitor.sinks:
            self.monitor.emit(DISPATCH, rec.task_id, rec.launch_time, executor=label)
        try:
            efut = ex.submit_task(rec.task_id, attempt, rec.app, rec.args, rec.kwargs)
        except Exception as e:
            efut = ExecFuture(rec.task_id, attempt)
            efut.set_exception(e if isinstance(e, TaskError) else TaskError(str(e)))
        if self.task_timeout:
            heapq.heappush(self._deadlines,
                           (rec.launch_time + self.task_timeout, rec.task_id, attempt))
        tid = rec.task_id
        efut.add_done_callback(lambda f: self._events.put((_DONE, tid, attempt, f)))

    def _expire_deadlines(self):
        now = time.time()
        while self._deadlines and self._deadlines[0][0] <= now:
            _, tid, attempt = heapq.heappop(self._deadlines)
            rec = self.tasks.get(tid)
            if rec is None or rec.launches - 1 != attempt or rec.state in (
                    S.SUCCEEDED, S.FAILED, S.MEMO_HIT):
                continue
            f = ExecFuture(tid, attempt)
            f.set_exception(TaskTimeout(f"task {tid} exceeded {self.task_timeout}s",
                                        timeout=self.task_timeout))
            self.handle_completion(tid, attempt, f)

    def handle_completion(self, tid: int, attempt: int, efut: ExecFuture):
        rec = self.tasks[tid]
        if attempt != rec.launches - 1 or rec.state not in (S.LAUNCHED, S.RUNNING):
            return  # stale attempt (timed out or superseded)
        now = time.time()
        exc = efut.exception()
        started = efut.started
        mon = self.monitor
        timing = {}
        if started is not None:
            end = efut.finished or now
            self._state(rec, S.RUNNING, max(started, rec.launch_time), worker=efut.worker)
            timing = {"start": mon.rel(started), "end": mon.rel(end), "worker": efut.worker}
        elif exc is None:
            self._state(rec, S.RUNNING, now)
        if exc is None:
            value = efut.result()
            rec.complete_time = now
            self._state(rec, S.SUCCEEDED, now, **timing)
            self.counts["succeeded"] += 1
            if rec.memoize and rec.memo_key is not None:
                self.memo.store(rec.memo_key, value)
                if self.checkpoint is not None:
                    self.checkpoint.append(rec.memo_key, value, now)
            self._resolve_outputs(rec)
            rec.future.set_result(value)
            self._finish(rec, True)
            return
        self._state(rec, S.FAILED, now, error=type(exc).__name__, **timing)
        if rec.retries_left > 0:
            rec.retries_left -= 1
            self._state(rec, S.RETRYING)
            self._state(rec, S.LAUNCHABLE)
            self.dispatch(rec)
            return
        rec.complete_time = now
        if not isinstance(exc, TaskError):
            exc = TaskError(f"{type(exc).__name__}: {exc}")
        self._fail_final(rec, exc)

    def _resolve_outputs(self, rec: TaskRecord):
        for df in rec.outputs:
            path = df.file.filepath
            if os.path.exists(path):
                df.set_result(self.data_manager.staged_output(df.file))
            else:
                df.set_exception(OutputMissing(f"task {rec.task_id} did not create {path}",
                                               path=path, task_id=rec.task_id))

    def _fail_final(self, rec: TaskRecord, exc: BaseException):
        self.counts["failed"] += 1
        for df in rec.outputs:
            df.set_exception(exc)
        rec.future.set_exception(exc)
        self._finish(rec, False)

    def _fail_dependency(self, rec: TaskRecord, dep_id: int, cause=None):
        dep = self.tasks[dep_id]
        if cause is None:
            cause = dep.future.exception()
        root = cause.detail.get("root", dep_id) if isinstance(cause, DependencyError) else dep_id
        err = DependencyError(f"dependency task {dep_id} failed: {cause}",
                              root=root, dependency=dep_id,
                              cause=type(cause).__name__ if cause is not None else None)
        rec.complete_time = time.time()
        self._state(rec, S.FAILED, error="DependencyError", root=root)
        self._fail_final(rec, err)

    def _finish(self, rec: TaskRecord, ok: bool):
        """Fire outgoing edges and account for one more terminal task."""
        for child in self.forward_edges.pop(rec.task_id, ()):
            self.on_dependency_resolved(child, rec.task_id, ok)
        self.unresolved.pop(rec.task_id, None)
        with self._done_cv:
            self._terminal += 1
            if self._terminal == self._submitted:
                self._done_cv.notify_all()

    # introspection ----------------------------------------------------------
    def outstanding(self) -> int:
        return self._submitted - self._terminal

    def wait_all(self, timeout: float | None = None) -> dict[str, int]:
        """Block until every submitted task is terminal; return the run summary."""
        deadline = None if timeout is None else time.time() + timeout
        with self._done_cv:
            while self._terminal < self._submitted:
                remaining = None if deadline is None else deadline - time.time()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError(f"{self.outstanding()} tasks still outstanding")
                self._done_cv.wait(remaining if remaining is not None else 1.0)
        self.monitor.flush()
        return dict(self.counts)

    def executor_submissions(self) -> dict[str, int]:
        return {label: ex.submitted for label, ex in self.executors.items()}

    def shutdown(self):
        if self._closed:
            return
        self._closed = True
        if self.strategy is not None:
            self.strategy.stop()
        for ex in self.executors.values():
            try:
                ex.shutdown()
            except Exception:
                logger.exception("executor %s failed to shut down", ex.label)
        self._events.put((_STOP,))
        self._loop.join(timeout=10)
        if self.checkpoint is not None:
            self.checkpoint.close()
        self.monitor.close()


def serial_reference(tasks: list[tuple[Any, tuple, dict]]) -> list:
    """Evaluate ``(callable, args, kwargs)`` triples in order, in this thread.

    Arguments may reference earlier results as ``Ref(i)``; a failed task
    poisons everything that references it (the value is the exception).
    Used as the independent oracle for the kernel's results.
    """
    results: list = []

    def sub(x):
        if isinstance(x, Ref):
            return results[x.index]
        if isinstance(x, (list, tuple)):
            return type(x)(sub(i) for i in x)
        if isinstance(x, dict):
            return {k: sub(v) for k, v in x.items()}
        return x

    def poisoned(x):
        if isinstance(x, Ref):
            return isinstance(results[x.index], BaseException)
        if isinstance(x, (list, tuple)):
            return any(poisoned(i) for i in x)
        if isinstance(x, dict):
            return any(poisoned(v) for v in x.values())
        return False

    for fn, args, kwargs in tasks:
        if poisoned(args) or poisoned(kwargs):
            results.append(DependencyError("poisoned"))
            continue
        try:
            results.append(fn(*sub(args), **sub(kwargs)))
        except Exception as e:
            results.append(e)
    return results


class Ref:
    __slots__ = ("index",)

    def __init__(self, index: int):
        self.index = index
