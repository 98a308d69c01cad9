"""Apps, task records, futures and memoization keys."""

from __future__ import annotations

import enum
import hashlib
import importlib
import inspect
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Any, Callable

from . import codec
from .codec import FileRef
from .errors import IllegalTransition, UnknownApp

DIGEST_ALGORITHM = "sha256"


class AppKind(enum.Enum):
    NATIVE = "native"
    SHELL = "shell"


@dataclass(frozen=True)
class AppSpec:
    """What to run. Native apps are looked up by ``name`` on the worker."""

    kind: AppKind
    name: str
    body_fingerprint: str
    command: str | None = None
    stdout: str | None = None
    stderr: str | None = None

    def to_wire(self) -> list:
        return [self.kind.value, self.name, self.body_fingerprint,
                self.command, self.stdout, self.stderr]

    @classmethod
    def from_wire(cls, w: list) -> AppSpec:
        return cls(AppKind(w[0]), *w[1:])


def fingerprint(obj: Callable | str) -> str:
    """Stable content hash of a function body or a command template."""
    if isinstance(obj, str):
        text = obj.encode()
    else:
        try:
            text = inspect.getsource(obj).encode()
        except (OSError, TypeError):
            code = obj.__code__
            text = code.co_code + repr(code.co_consts).encode()
    return hashlib.sha256(text).hexdigest()


class AppRegistry:
    """Name to callable map consulted by workers.

    Names of the form ``module:qualname`` are imported on first use, so any
    process that can import the defining module can run the app.
    """

    def __init__(self):
        self._fns: dict[str, Callable] = {}
        self._lock = threading.Lock()

    def register(self, fn: Callable, name: str | None = None) -> str:
        name = name or f"{fn.__module__}:{fn.__qualname__}"
        with self._lock:
            self._fns[name] = fn
        return name

    def __contains__(self, name: str) -> bool:
        try:
            self.resolve(name)
        except UnknownApp:
            return False
        return True

    def resolve(self, name: str) -> Callable:
        fn = self._fns.get(name)
        if fn is not None:
            return fn
        module, sep, qualname = name.partition(":")
        if sep:
            try:
                obj = importlib.import_module(module)
                for part in qualname.split("."):
                    obj = getattr(obj, part)
            except (ImportError, AttributeError):
                raise UnknownApp(f"app {name!r} is not registered", name=name) from None
            fn = getattr(obj, "fn", obj)
            if callable(fn):
                with self._lock:
                    self._fns.setdefault(name, fn)
                return fn
        raise UnknownApp(f"app {name!r} is not registered", name=name)


REGISTRY = AppRegistry()

_default_kernel = None


def set_current_kernel(dfk) -> None:
    global _default_kernel
    _default_kernel = dfk


def current_kernel():
    if _default_kernel is None:
        raise RuntimeError("no DataFlowKernel is active; use `with DataFlowKernel(...)`")
    return _default_kernel


class App:
    """A registered unit of work. Calling it submits a task to the active kernel."""

    def __init__(self, spec: AppSpec, fn: Callable | None = None,
                 cache: bool | None = None, executors: str | None = None):
        self.spec = spec
        self.fn = fn
        self.cache = cache
        self.executors = executors

    @property
    def name(self) -> str:
        return self.spec.name

    def __call__(self, *args, **kwargs) -> AppFuture:
        return current_kernel().submit(self, args, kwargs)

    def __repr__(self):
        return f"<App {self.spec.kind.value}:{self.spec.name}>"


def native_app(fn: Callable | None = None, *, name: str | None = None,
               cache: bool | None = None, executor: str | None = None,
               registry: AppRegistry = REGISTRY):
    """Register ``fn`` as a native app; usable bare or with keyword options."""

    def wrap(f):
        key = registry.register(f, name)
        return App(AppSpec(AppKind.NATIVE, key, fingerprint(f)), f, cache, executor)

    return wrap(fn) if fn is not None else wrap


def shell_app(command: str, *, name: str | None = None, stdout: str | None = None,
              stderr: str | None = None, cache: bool | None = None,
              executor: str | None = None) -> App:
    """An app that runs ``command`` after filling ``{0}``/``{key}`` placeholders."""
    fp = fingerprint(command)
    spec = AppSpec(AppKind.SHELL, name or f"shell-{fp[:12]}", fp, command, stdout, stderr)
    return App(spec, None, cache, executor)


class TaskState(enum.Enum):
    PENDING = "pending"
    LAUNCHABLE = "launchable"
    LAUNCHED = "launched"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    MEMO_HIT = "memo_hit"
    RETRYING = "retrying"


S = TaskState
LEGAL_TRANSITIONS: frozenset[tuple[TaskState, TaskState]] = frozenset({
    (S.PENDING, S.LAUNCHABLE),
    (S.LAUNCHABLE, S.LAUNCHED),
    (S.LAUNCHED, S.RUNNING),
    (S.RUNNING, S.SUCCEEDED),
    (S.RUNNING, S.FAILED),
    (S.FAILED, S.RETRYING),
    (S.RETRYING, S.LAUNCHABLE),
    (S.PENDING, S.MEMO_HIT),
    # dependency failure: the task never becomes launchable
    (S.PENDING, S.FAILED),
    # dispatch refused (bad executor hint) or attempt lost before it ran
    (S.LAUNCHABLE, S.FAILED),
    (S.LAUNCHED, S.FAILED),
})
TERMINAL_STATES = frozenset({S.SUCCEEDED, S.MEMO_HIT, S.FAILED})


def is_legal_path(states: list[TaskState]) -> bool:
    if not states or states[0] is not S.PENDING:
        return False
    return all((a, b) in LEGAL_TRANSITIONS for a, b in zip(states, states[1:]))


class AppFuture(Future):
    """Single-update handle for a task's eventual result."""

    def __init__(self, task_id: int):
        super().__init__()
        self.task_id = task_id

    def __repr__(self):
        return f"<AppFuture task={self.task_id} {self._state.lower()}>"


class DataFuture(Future):
    """Future of an output file produced by task ``task_id``."""

    def __init__(self, parent: AppFuture, file: FileRef):
        super().__init__()
        self.parent = parent
        self.task_id = parent.task_id
        self.file = file

    @property
    def filepath(self) -> str:
        return self.file.filepath

    def __repr__(self):
        return f"<DataFuture task={self.task_id} {self.file.uri}>"


@dataclass(eq=False)
class TaskRecord:
    task_id: int
    app: AppSpec
    args: tuple
    kwargs: dict
    depends_on: set[int]
    future: AppFuture
    retries_left: int = 0
    executor_hint: str | None = None
    memoize: bool = False
    state: TaskState = TaskState.PENDING
    submit_time: float = 0.0
    launch_time: float | None = None
    complete_time: float | None = None
    launches: int = 0
    memo_key: str | None = None
    executor: str | None = None
    history: list[tuple[TaskState, float]] = field(default_factory=list)
    outputs: list[DataFuture] = field(default_factory=list)

    def set_state(self, new: TaskState, ts: float | None = None) -> TaskState:
        old = self.state
        if (old, new) not in LEGAL_TRANSITIONS:
            raise IllegalTransition(f"task {self.task_id}: {old.name} -> {new.name}")
        self.state = new
        self.history.append((new, time.time() if ts is None else ts))
        return old


def find_futures(obj: Any, acc: list | None = None) -> list[Future]:
    """All futures nested in ``obj`` (lists, tuples, dicts)."""
    if acc is None:
        acc = []
    if isinstance(obj, (AppFuture, DataFuture)):
        acc.append(obj)
    elif isinstance(obj, (list, tuple)):
        for x in obj:
            find_futures(x, acc)
    elif isinstance(obj, dict):
        for x in obj.values():
            find_futures(x, acc)
    return acc


def substitute(obj: Any) -> Any:
    """Replace every (resolved) future in ``obj`` with its value."""
    if isinstance(obj, (AppFuture, DataFuture)):
        return obj.result()
    if isinstance(obj, list):
        return [substitute(x) for x in obj]
    if isinstance(obj, tuple):
        return tuple(substitute(x) for x in obj)
    if isinstance(obj, dict):
        return {k: substitute(v) for k, v in obj.items()}
    return obj


def memo_key(app: AppSpec, args, kwargs) -> str:
    """Digest of (name, body fingerprint, canonical args, canonical kwargs)."""
    blob = codec.encode([app.name, app.body_fingerprint, list(args), dict(kwargs)])
    return hashlib.new(DIGEST_ALGORITHM, blob).hexdigest()
