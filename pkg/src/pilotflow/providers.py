"""Resource providers, channels, launchers and blocks.

A provider turns a launch command into a *block*: one request for
``nodes_per_block`` nodes, on which the launcher starts one or more agents.
Elasticity only ever adds or removes whole blocks.

Two providers are implemented. :class:`LocalProvider` forks the process tree
on this host right away. :class:`SimLrmProvider` models a batch scheduler:
blocks wait in a queue for a sampled delay, at most ``max_active_blocks`` run
at once, a block may fail instead of starting, and ``walltime`` ends a lease.
"""

from __future__ import annotations

import enum
import itertools
import logging
import os
import random
import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field

from .errors import ConfigError, IllegalTransition, SpawnError
from .forkserver import ForkedAgent, ForkServer

logger = logging.getLogger(__name__)


class BlockState(enum.Enum):
    REQUESTED = "requested"
    QUEUED = "queued"
    ACTIVE = "active"
    TERMINATING = "terminating"
    DONE = "done"
    FAILED = "failed"


B = BlockState
BLOCK_TRANSITIONS = {
    B.REQUESTED: {B.QUEUED, B.FAILED},
    # a queued request can be withdrawn or rejected before it starts
    B.QUEUED: {B.ACTIVE, B.TERMINATING, B.FAILED},
    B.ACTIVE: {B.TERMINATING, B.FAILED},
    B.TERMINATING: {B.DONE},
    B.DONE: set(),
    B.FAILED: set(),
}
TERMINAL_BLOCK_STATES = {B.DONE, B.FAILED}


@dataclass
class Block:
    block_id: str
    nodes_per_block: int
    state: BlockState = BlockState.REQUESTED
    procs: list = field(default_factory=list)
    history: list = field(default_factory=list)
    submit_time: float = field(default_factory=time.time)
    active_time: float | None = None
    end_time: float | None = None
    reason: str | None = None
    cancelled: bool = False

    def __post_init__(self):
        self.history.append((self.submit_time, self.state))

    @property
    def pending(self) -> bool:
        return self.state in (B.REQUESTED, B.QUEUED)

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_BLOCK_STATES


# launchers ------------------------------------------------------------------

@dataclass(frozen=True)
class LauncherSpec:
    """``single`` starts one agent per block, ``per_node`` starts ``n`` per node."""

    kind: str = "per_node"
    n: int = 1

    def __post_init__(self):
        if self.kind not in ("single", "per_node"):
            raise ConfigError("launcher", f"unknown launcher {self.kind!r}")
        if self.n < 1:
            raise ConfigError("launcher", "agents per node must be >= 1")

    @classmethod
    def parse(cls, value) -> LauncherSpec:
        if value is None:
            return cls()
        if isinstance(value, LauncherSpec):
            return value
        if isinstance(value, dict):
            return cls(value.get("type", value.get("kind", "per_node")), int(value.get("n", 1)))
        kind, _, n = str(value).partition(":")
        return cls(kind, int(n) if n else 1)

    def to_config(self):
        return "single" if self.kind == "single" else f"per_node:{self.n}"

    def agents(self, nodes: int) -> int:
        return 1 if self.kind == "single" else self.n * nodes


@dataclass(frozen=True)
class LaunchCommand:
    argv: tuple
    env: dict


def render_launch(cmd, launcher: LauncherSpec, nodes: int) -> list[LaunchCommand]:
    """Expand one agent command into the per-agent commands of a block.

    Each agent gets ``PILOTFLOW_AGENT_INDEX`` (0-based over the block),
    ``PILOTFLOW_NODE_INDEX`` and ``PILOTFLOW_AGENT_COUNT``.
    """
    if nodes < 1:
        raise ConfigError("nodes_per_block", "must be >= 1")
    argv = tuple(cmd)
    total = launcher.agents(nodes)
    per_node = launcher.n if launcher.kind == "per_node" else total
    out = []
    for i in range(total):
        env = {"PILOTFLOW_AGENT_INDEX": str(i),
               "PILOTFLOW_NODE_INDEX": str(i // per_node if launcher.kind == "per_node" else 0),
               "PILOTFLOW_AGENT_COUNT": str(total),
               "PILOTFLOW_NODES": str(nodes)}
        out.append(LaunchCommand(argv, env))
    return out


# channels -------------------------------------------------------------------

class Channel:
    def spawn(self, argv, env: dict, log_path: str | None = None):
        raise NotImplementedError


class LocalChannel(Channel):
    """Start commands on this host, each in its own session (process group).

    With ``fork_server`` enabled, commands of the form ``python -m <module>``
    for a module in ``preload`` are forked from a server process that has the
    module imported already, which avoids interpreter start-up per agent.
    Anything else is started with :class:`subprocess.Popen`.
    """

    DEFAULT_PRELOAD = ("pilotflow.executors.htex.manager", "pilotflow.executors.llex.worker")

    def __init__(self, fork_server: bool = True, preload=DEFAULT_PRELOAD):
        self.fork_server = fork_server
        self.preload = tuple(preload)

    def spawn(self, argv, env: dict, log_path: str | None = None):
        argv = list(argv)
        if (self.fork_server and len(argv) >= 3 and argv[0] == sys.executable
                and argv[1] == "-m" and argv[2] in self.preload):
            server = _fork_server(self.preload)
            try:
                return ForkedAgent(server, server.spawn(argv[2], argv[3:], env, log_path))
            except OSError as e:
                raise SpawnError(f"cannot fork {argv[2]!r}: {e}") from None
        full_env = {**os.environ, **env}
        log = open(log_path, "ab") if log_path else subprocess.DEVNULL
        try:
            return subprocess.Popen(argv, env=full_env, stdin=subprocess.DEVNULL,
                                    stdout=log, stderr=log if log_path else None,
                                    start_new_session=True)
        except OSError as e:
            raise SpawnError(f"cannot start {argv[0]!r}: {e}") from None
        finally:
            if log_path:
                log.close()


_SERVERS: dict[tuple, ForkServer] = {}
_SERVERS_LOCK = threading.Lock()


def _fork_server(preload: tuple) -> ForkServer:
    with _SERVERS_LOCK:
        srv = _SERVERS.get(preload)
        if srv is None:
            srv = _SERVERS[preload] = ForkServer(preload)
        return srv


class SSHChannel(Channel):
    """Placeholder for remote execution; only the interface is provided."""

    def __init__(self, hostname: str, username: str | None = None):
        self.hostname = hostname
        self.username = username

    def spawn(self, argv, env, log_path=None):
        raise NotImplementedError("SSH channels are not implemented")


def _kill_tree(proc, sig):
    try:
        os.killpg(proc.pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


# providers ------------------------------------------------------------------

class ExecutionProvider:
    """Uniform submit / status / cancel over blocks.

    ``on_event(block, old_state, new_state)`` is invoked on every block state
    change; executors use it for monitoring and capacity accounting.
    """

    label = "provider"

    def __init__(self, nodes_per_block: int = 1, init_blocks: int = 1, min_blocks: int = 0,
                 max_blocks: int = 10, walltime: float | None = None,
                 launcher: LauncherSpec | str | None = None, partition: str | None = None,
                 channel: Channel | None = None, log_dir: str | None = None,
                 block_granularity: int = 1):
        if nodes_per_block < 1:
            raise ConfigError("provider.nodes_per_block", "must be >= 1")
        if not 0 <= min_blocks <= init_blocks <= max_blocks:
            raise ConfigError("provider.init_blocks",
                              "need min_blocks <= init_blocks <= max_blocks")
        if walltime is not None and walltime <= 0:
            raise ConfigError("provider.walltime", "must be positive")
        self.nodes_per_block = nodes_per_block
        self.init_blocks = init_blocks
        self.min_blocks = min_blocks
        self.max_blocks = max_blocks
        self.walltime = walltime
        self.launcher = LauncherSpec.parse(launcher)
        self.partition = partition
        self.block_granularity = block_granularity
        self.channel = channel or LocalChannel()
        self.log_dir = log_dir
        self.blocks: dict[str, Block] = {}
        self.on_event = None
        self._ids = itertools.count()
        self._lock = threading.RLock()
        self._watcher: threading.Thread | None = None
        self._stop = threading.Event()

    # state machine ------------------------------------------------------
    def _set(self, block: Block, new: BlockState, reason: str | None = None):
        with self._lock:
            old = block.state
            if old is new:
                return
            if new not in BLOCK_TRANSITIONS[old]:
                raise IllegalTransition(f"block {block.block_id}: {old.value} -> {new.value}")
            block.state = new
            now = time.time()
            block.history.append((now, new))
            if new is B.ACTIVE:
                block.active_time = now
            if new in TERMINAL_BLOCK_STATES:
                block.end_time = now
            if reason:
                block.reason = reason
        cb = self.on_event
        if cb is not None:
            try:
                cb(block, old, new)
            except Exception:
                logger.exception("block event callback failed")

    # interface -----------------------------------------------------------
    def submit(self, cmd, nodes_per_block: int | None = None, env: dict | None = None) -> str:
        nodes = nodes_per_block or self.nodes_per_block
        bid = f"{next(self._ids)}"
        block = Block(bid, nodes)
        block.cmd = tuple(cmd)
        block.env = dict(env or {})
        with self._lock:
            self.blocks[bid] = block
        if self.on_event is not None:
            self.on_event(block, None, B.REQUESTED)
        self._ensure_watcher()
        self._request(block)
        return bid

    def status(self, block_id: str) -> BlockState:
        block = self.blocks[block_id]
        self._poll(block)
        return block.state

    def cancel(self, block_id: str) -> None:
        """Stop a block. Cancelling a finished or cancelled block does nothing."""
        with self._lock:
            block = self.blocks[block_id]
            if block.cancelled or block.terminal:
                return
            block.cancelled = True
            was = block.state
            if was in (B.REQUESTED,):
                self._set(block, B.QUEUED)
            self._set(block, B.TERMINATING, "cancelled")
        threading.Thread(target=self._terminate, args=(block,), daemon=True).start()

    def counts(self) -> dict[str, int]:
        with self._lock:
            out = {s.value: 0 for s in BlockState}
            for b in self.blocks.values():
                out[b.state.value] += 1
        return out

    def active_blocks(self) -> list[str]:
        return [b.block_id for b in self.blocks.values() if b.state is B.ACTIVE]

    def pending_blocks(self) -> list[str]:
        return [b.block_id for b in self.blocks.values() if b.pending]

    def shutdown(self):
        for bid in list(self.blocks):
            self.cancel(bid)
        deadline = time.time() + 5
        for b in list(self.blocks.values()):
            while not b.terminal and time.time() < deadline:
                time.sleep(0.02)
        self._stop.set()

    # mechanics -----------------------------------------------------------
    def _request(self, block: Block):
        self._set(block, B.QUEUED)
        self._start(block)

    def _start(self, block: Block):
        with self._lock:
            if block.cancelled or block.state is not B.QUEUED:
                return
            try:
                for i, lc in enumerate(render_launch(block.cmd, self.launcher, block.nodes_per_block)):
                    env = {**block.env, **lc.env, "PILOTFLOW_BLOCK_ID": block.block_id}
                    log = (os.path.join(self.log_dir, f"block_{block.block_id}_{i}.log")
                           if self.log_dir else None)
                    block.procs.append(self.channel.spawn(lc.argv, env, log))
            except SpawnError as e:
                for p in block.procs:
                    _kill_tree(p, signal.SIGKILL)
                self._set(block, B.FAILED, str(e))
                return
            self._set(block, B.ACTIVE)
        if self.walltime:
            t = threading.Timer(self.walltime, self._expire, args=(block,))
            t.daemon = True
            t.start()

    def _expire(self, block: Block):
        with self._lock:
            if block.state is not B.ACTIVE:
                return
            block.cancelled = True
            self._set(block, B.TERMINATING, "walltime")
        self._terminate(block, grace=0.0)

    def _terminate(self, block: Block, grace: float = 1.0):
        for p in block.procs:
            _kill_tree(p, signal.SIGTERM if grace else signal.SIGKILL)
        deadline = time.time() + grace
        for p in block.procs:
            try:
                p.wait(max(0.0, deadline - time.time()))
            except subprocess.TimeoutExpired:
                _kill_tree(p, signal.SIGKILL)
                p.wait()
        with self._lock:
            if block.state is B.TERMINATING:
                self._set(block, B.DONE)
        self._on_block_end(block)

    def _poll(self, block: Block):
        with self._lock:
            if block.state is not B.ACTIVE or not block.procs:
                return
            codes = [p.poll() for p in block.procs]
            if any(c is None for c in codes):
                return
            if all(c == 0 for c in codes):
                self._set(block, B.TERMINATING, "exited")
                self._set(block, B.DONE)
            else:
                self._set(block, B.FAILED, f"agents exited with {codes}")
        self._on_block_end(block)

    def _on_block_end(self, block: Block):
        pass

    def _ensure_watcher(self):
        with self._lock:
            if self._watcher is None:
                self._watcher = threading.Thread(target=self._watch, name=f"{self.label}-watch",
                                                 daemon=True)
                self._watcher.start()

    def _watch(self):
        while not self._stop.wait(0.1):
            for b in list(self.blocks.values()):
                self._poll(b)


class LocalProvider(ExecutionProvider):
    """Fork the block's agents on this host immediately."""

    label = "local"


@dataclass(frozen=True)
class Delay:
    """A fixed queue delay, or one drawn uniformly from ``[low, high]``."""

    low: float = 0.0
    high: float | None = None

    @classmethod
    def parse(cls, value) -> Delay:
        if isinstance(value, Delay):
            return value
        if isinstance(value, (int, float)):
            return cls(float(value))
        if isinstance(value, (list, tuple)) and len(value) == 2:
            return cls(float(value[0]), float(value[1]))
        if isinstance(value, dict):
            if "fixed" in value:
                return cls(float(value["fixed"]))
            return cls(float(value["low"]), float(value["high"]))
        raise ConfigError("provider.queue_delay", f"cannot parse {value!r}")

    def sample(self, rng: random.Random) -> float:
        if self.high is None:
            return self.low
        return rng.uniform(self.low, self.high)

    def to_config(self):
        return self.low if self.high is None else [self.low, self.high]


class SimLrmProvider(ExecutionProvider):
    """A simulated batch scheduler in front of local process spawning."""

    label = "sim"

    def __init__(self, queue_delay=0.0, max_active_blocks: int = 1000,
                 failure_rate: float = 0.0, seed: int | None = None, **kw):
        super().__init__(**kw)
        if not 0.0 <= failure_rate <= 1.0:
            raise ConfigError("provider.failure_rate", "must be within [0, 1]")
        if max_active_blocks < 1:
            raise ConfigError("provider.max_active_blocks", "must be >= 1")
        self.queue_delay = Delay.parse(queue_delay)
        if self.queue_delay.low < 0 or (self.queue_delay.high is not None
                                        and self.queue_delay.high < self.queue_delay.low):
            raise ConfigError("provider.queue_delay", "delay range must be non-negative")
        self.max_active_blocks = max_active_blocks
        self.failure_rate = failure_rate
        self.rng = random.Random(seed)
        self._eligible: list[Block] = []

    def _request(self, block: Block):
        self._set(block, B.QUEUED)
        with self._lock:
            delay = self.queue_delay.sample(self.rng)
            fail = self.rng.random() < self.failure_rate
        block.sim_delay = delay
        if delay <= 0:
            self._leave_queue(block, fail)
        else:
            t = threading.Timer(delay, self._leave_queue, args=(block, fail))
            t.daemon = True
            t.start()

    def _leave_queue(self, block: Block, fail: bool):
        with self._lock:
            if block.state is not B.QUEUED or block.cancelled:
                return
            if fail:
                self._set(block, B.FAILED, "simulated scheduler failure")
                return
            self._eligible.append(block)
            self._promote()

    def _promote(self):
        with self._lock:
            running = sum(1 for b in self.blocks.values()
                          if b.state in (B.ACTIVE, B.TERMINATING))
            while self._eligible and running < self.max_active_blocks:
                block = self._eligible.pop(0)
                if block.state is not B.QUEUED or block.cancelled:
                    continue
                self._start(block)
                running += 1

    def _on_block_end(self, block: Block):
        self._promote()


def make_provider(kind: str, **kw) -> ExecutionProvider:
    if kind == "local":
        for k in ("queue_delay", "max_active_blocks", "failure_rate", "seed"):
            kw.pop(k, None)
        return LocalProvider(**kw)
    if kind in ("sim", "sim_lrm"):
        return SimLrmProvider(**kw)
    raise ConfigError("provider.type", f"unknown provider type {kind!r}")
