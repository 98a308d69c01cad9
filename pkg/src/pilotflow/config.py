"""Run configuration: which executors, on which resources, with which policies.

Configuration is kept apart from program code. The file format is YAML;
executor and provider keys follow the usual pilot-job vocabulary
(``nodes_per_block``, ``init_blocks``, ``partition``, ``walltime``)::

    seed: 7
    retries: 1
    monitor_log: run.log
    checkpointing: {enabled: true, path: run.ckpt, files: []}
    strategy: {enabled: true, parallelism: 1.0, poll_period: 1.0, idle_timeout: 10}
    executors:
      - label: htex_local
        type: htex
        workers_per_node: 4
        provider:
          type: local
          nodes_per_block: 1
          init_blocks: 1
          max_blocks: 4
          walltime: "00:30:00"

Errors are reported as :class:`ConfigError` carrying the offending field path,
for example ``executors[1].label``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any

import yaml

from .errors import ConfigError

EXECUTOR_TYPES = ("htex", "llex", "local")
PROVIDER_TYPES = ("local", "sim")

_EXECUTOR_PARAMS = {
    "htex": {"workers_per_node": int, "prefetch_capacity": int, "heartbeat_period": float,
             "heartbeat_threshold": float, "batch_size_max": int, "address": str,
             "sandbox_root": str},
    "llex": {"workers": int, "replication_factor": int, "task_timeout": float,
             "max_timed_retries": int, "address": str, "sandbox_root": str},
    "local": {"workers": int, "sandbox_root": str},
}


def parse_duration(value, path: str) -> float | None:
    """Seconds from a number or an ``[[HH:]MM:]SS`` string."""
    if value is None:
        return None
    if isinstance(value, bool):
        raise ConfigError(path, "expected a duration")
    if isinstance(value, (int, float)):
        secs = float(value)
    else:
        try:
            parts = [float(p) for p in str(value).split(":")]
        except ValueError:
            raise ConfigError(path, f"cannot parse duration {value!r}") from None
        if not 1 <= len(parts) <= 3:
            raise ConfigError(path, f"cannot parse duration {value!r}")
        secs = 0.0
        for p in parts:
            secs = secs * 60 + p
    if secs <= 0:
        raise ConfigError(path, "duration must be positive")
    return secs


@dataclass
class ProviderConfig:
    type: str = "local"
    nodes_per_block: int = 1
    init_blocks: int = 1
    min_blocks: int = 0
    max_blocks: int = 1
    walltime: float | None = None
    partition: str | None = None
    launcher: str = "per_node:1"
    channel: str = "local"
    queue_delay: Any = 0.0
    max_active_blocks: int = 1000
    failure_rate: float = 0.0


@dataclass
class ExecutorConfig:
    label: str
    type: str
    params: dict = field(default_factory=dict)
    provider: ProviderConfig | None = None


@dataclass
class StrategySection:
    enabled: bool = False
    parallelism: float = 1.0
    poll_period: float = 1.0
    idle_timeout: float = 10.0


@dataclass
class CheckpointConfig:
    enabled: bool = False
    path: str | None = None
    files: list = field(default_factory=list)


@dataclass
class RunConfig:
    executors: list
    strategy: StrategySection = field(default_factory=StrategySection)
    checkpointing: CheckpointConfig = field(default_factory=CheckpointConfig)
    retries: int = 0
    memoize: bool = False
    task_timeout: float | None = None
    monitor_log: str | None = None
    scaling_log: str | None = None
    seed: int | None = None

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for ex, raw in zip(self.executors, out["executors"]):
            flat = {"label": ex.label, "type": ex.type, **ex.params}
            if ex.provider is not None:
                flat["provider"] = raw["provider"]
            raw.clear()
            raw.update(flat)
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


# parsing --------------------------------------------------------------------

def _expect(d, path) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(path, "expected a mapping")
    return d


def _typed(value, kind, path):
    if value is None:
        return None
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind is str:
            return str(value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(path, f"expected {kind.__name__}, got {value!r}")


def _reject_unknown(d: dict, allowed, path: str):
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown field")


def parse_provider(d, path) -> ProviderConfig:
    d = _expect(d, path)
    fields = {f.name for f in dataclasses.fields(ProviderConfig)}
    _reject_unknown(d, fields, path)
    pc = ProviderConfig()
    for name, kind in (("nodes_per_block", int), ("init_blocks", int), ("min_blocks", int),
                       ("max_blocks", int), ("max_active_blocks", int),
                       ("failure_rate", float)):
        if name in d:
            setattr(pc, name, _typed(d[name], kind, f"{path}.{name}"))
    for name in ("type", "partition", "launcher", "channel"):
        if name in d and d[name] is not None:
            setattr(pc, name, str(d[name]))
    if "walltime" in d:
        pc.walltime = parse_duration(d["walltime"], f"{path}.walltime")
    if "queue_delay" in d:
        q = d["queue_delay"]
        pc.queue_delay = list(q) if isinstance(q, (list, tuple)) else q
    if pc.type not in PROVIDER_TYPES:
        raise ConfigError(f"{path}.type", f"unknown provider type {pc.type!r}")
    if pc.channel != "local":
        raise ConfigError(f"{path}.channel", "only the local channel is available")
    if pc.nodes_per_block < 1:
        raise ConfigError(f"{path}.nodes_per_block", "must be >= 1")
    if not 0 <= pc.min_blocks <= pc.init_blocks <= pc.max_blocks:
        raise ConfigError(f"{path}.init_blocks", "need min_blocks <= init_blocks <= max_blocks")
    if not 0.0 <= pc.failure_rate <= 1.0:
        raise ConfigError(f"{path}.failure_rate", "must be within [0, 1]")
    from .providers import Delay, LauncherSpec
    try:
        LauncherSpec.parse(pc.launcher)
    except (ConfigError, ValueError) as e:
        raise ConfigError(f"{path}.launcher", str(e)) from None
    try:
        Delay.parse(pc.queue_delay)
    except (ConfigError, ValueError, KeyError, TypeError):
        raise ConfigError(f"{path}.queue_delay", f"cannot parse {pc.queue_delay!r}") from None
    return pc


def parse_executor(d, path) -> ExecutorConfig:
    d = _expect(d, path)
    label = d.get("label")
    if not label or not isinstance(label, str):
        raise ConfigError(f"{path}.label", "a non-empty string label is required")
    kind = d.get("type")
    if kind not in EXECUTOR_TYPES:
        raise ConfigError(f"{path}.type", f"unknown executor type {kind!r}")
    spec = _EXECUTOR_PARAMS[kind]
    allowed = set(spec) | {"label", "type"} | ({"provider"} if kind != "local" else set())
    _reject_unknown(d, allowed, path)
    params = {k: _typed(d[k], spec[k], f"{path}.{k}") for k in spec if k in d}
    for k in ("workers_per_node", "workers", "replication_factor", "batch_size_max"):
        if k in params and params[k] is not None and params[k] < (0 if k == "workers" else 1):
            raise ConfigError(f"{path}.{k}", "out of range")
    hp = params.get("heartbeat_period", 2.0)
    ht = params.get("heartbeat_threshold")
    if hp is not None and hp <= 0:
        raise ConfigError(f"{path}.heartbeat_period", "must be positive")
    if ht is not None and ht <= hp:
        raise ConfigError(f"{path}.heartbeat_threshold", "must exceed heartbeat_period")
    provider = parse_provider(d["provider"], f"{path}.provider") if "provider" in d else None
    return ExecutorConfig(label, kind, params, provider)


def parse_config(d) -> RunConfig:
    d = _expect(d, "")
    _reject_unknown(d, {f.name for f in dataclasses.fields(RunConfig)}, "")
    raw_execs = d.get("executors")
    if not isinstance(raw_execs, list) or not raw_execs:
        raise ConfigError("executors", "at least one executor is required")
    execs = [parse_executor(e, f"executors[{i}]") for i, e in enumerate(raw_execs)]
    seen = {}
    for i, e in enumerate(execs):
        if e.label in seen:
            raise ConfigError(f"executors[{i}].label", f"duplicate executor label {e.label!r}")
        seen[e.label] = i

    s = _expect(d.get("strategy"), "strategy")
    _reject_unknown(s, {f.name for f in dataclasses.fields(StrategySection)}, "strategy")
    strategy = StrategySection(
        enabled=_typed(s.get("enabled", False), bool, "strategy.enabled"),
        parallelism=_typed(s.get("parallelism", 1.0), float, "strategy.parallelism"),
        poll_period=parse_duration(s.get("poll_period", 1.0), "strategy.poll_period"),
        idle_timeout=_typed(s.get("idle_timeout", 10.0), float, "strategy.idle_timeout"),
    )
    if not 0.0 < strategy.parallelism <= 1.0:
        raise ConfigError("strategy.parallelism", "must be in (0, 1]")
    if strategy.idle_timeout < 0:
        raise ConfigError("strategy.idle_timeout", "must be >= 0")

    c = _expect(d.get("checkpointing"), "checkpointing")
    _reject_unknown(c, {"enabled", "path", "files"}, "checkpointing")
    files = c.get("files") or []
    if not isinstance(files, list):
        raise ConfigError("checkpointing.files", "expected a list of paths")
    ckpt = CheckpointConfig(_typed(c.get("enabled", False), bool, "checkpointing.enabled"),
                            c.get("path"), [str(f) for f in files])
    if ckpt.enabled and not ckpt.path:
        raise ConfigError("checkpointing.path", "required when checkpointing is enabled")

    retries = _typed(d.get("retries", 0), int, "retries")
    if retries < 0:
        raise ConfigError("retries", "must be >= 0")
    timeout = d.get("task_timeout")
    seed = d.get("seed")
    return RunConfig(
        executors=execs, strategy=strategy, checkpointing=ckpt, retries=retries,
        memoize=_typed(d.get("memoize", False), bool, "memoize"),
        task_timeout=parse_duration(timeout, "task_timeout") if timeout is not None else None,
        monitor_log=d.get("monitor_log"), scaling_log=d.get("scaling_log"),
        seed=_typed(seed, int, "seed") if seed is not None else None,
    )


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError("config", f"cannot read {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError("config", f"invalid YAML: {e}") from None
    return parse_config(data)


def default_config(executor: str = "local", workers: int = 4) -> RunConfig:
    if executor == "local":
        return RunConfig([ExecutorConfig("local", "local", {"workers": workers})])
    if executor == "htex":
        return RunConfig([ExecutorConfig("htex", "htex", {"workers_per_node": workers},
                                         ProviderConfig())])
    if executor == "llex":
        return RunConfig([ExecutorConfig("llex", "llex", {"workers": workers})])
    raise ConfigError("executor", f"unknown executor type {executor!r}")


# building -------------------------------------------------------------------

def build_provider(pc: ProviderConfig, seed: int | None = None):
    from .providers import LocalProvider, SimLrmProvider
    common = dict(nodes_per_block=pc.nodes_per_block, init_blocks=pc.init_blocks,
                  min_blocks=pc.min_blocks, max_blocks=pc.max_blocks, walltime=pc.walltime,
                  launcher=pc.launcher, partition=pc.partition)
    if pc.type == "sim":
        return SimLrmProvider(queue_delay=pc.queue_delay, max_active_blocks=pc.max_active_blocks,
                              failure_rate=pc.failure_rate, seed=seed, **common)
    return LocalProvider(**common)


def build_executor(ec: ExecutorConfig, seed: int | None = None):
    p = dict(ec.params)
    if ec.type == "local":
        from .executors.base import ExecutionKernel
        from .executors.local import LocalExecutor
        kernel = ExecutionKernel(sandbox_root=p.pop("sandbox_root", None))
        return LocalExecutor(ec.label, kernel=kernel, **p)
    if ec.type == "htex":
        from .executors.htex import HighThroughputExecutor
        provider = build_provider(ec.provider or ProviderConfig(), seed)
        return HighThroughputExecutor(ec.label, provider=provider, seed=seed, **p)
    from .executors.llex import LowLatencyExecutor
    provider = None
    if ec.provider is not None:
        provider = build_provider(ec.provider, seed)
        if "workers" in p:
            from .providers import LauncherSpec
            provider.launcher = LauncherSpec("per_node", max(1, p["workers"]))
    return LowLatencyExecutor(ec.label, provider=provider, **p)


def build_kernel(cfg: RunConfig, monitor_log: str | None = None, seed: int | None = None):
    """Instantiate executors, strategy and kernel from a configuration."""
    from .dflow import DataFlowKernel
    from .monitoring import Monitor
    from .strategy import Strategy, StrategyConfig

    seed = cfg.seed if seed is None else seed
    executors = [build_executor(ec, seed) for ec in cfg.executors]
    log = monitor_log or cfg.monitor_log
    monitor = Monitor.to_file(log, seed=seed) if log else None
    strategy = None
    if cfg.strategy.enabled:
        s = cfg.strategy
        strategy = Strategy(StrategyConfig(s.parallelism, s.poll_period, s.idle_timeout),
                            log_path=cfg.scaling_log)
    ck = cfg.checkpointing
    return DataFlowKernel(
        executors, retries=cfg.retries, memoize=cfg.memoize,
        checkpoint_files=ck.files if ck.enabled else (),
        checkpoint_path=ck.path if ck.enabled else None,
        monitor=monitor, seed=seed, task_timeout=cfg.task_timeout, strategy=strategy)
