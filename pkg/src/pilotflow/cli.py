"""Command-line entry point.

    pilotflow run [CONFIG] PROGRAM          run a built-in demo or a task-list file
    pilotflow bench latency|throughput|scaling|elasticity
    pilotflow report MONITOR_LOG

Exit status is 0 on success, 1 when any task failed and 2 on a configuration
or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
import tempfile

from . import apps
from .errors import ConfigError

EXIT_OK, EXIT_TASK_FAILED, EXIT_CONFIG = 0, 1, 2


# programs -------------------------------------------------------------------

def _hello(dfk, out):
    out.append(dfk.submit(apps.hello, ("World",)).result())


def _hello_shell(dfk, out):
    from .tasks import shell_app
    path = os.path.join(tempfile.mkdtemp(prefix="pilotflow-hello-"), "hello.txt")
    echo = shell_app("echo 'Hello {0}'", name="hello_shell", stdout=path)
    dfk.submit(echo, ("World",)).result()
    with open(path) as fh:
        out.append(fh.read().rstrip("\n"))


def _diamond(dfk, out):
    a = dfk.submit(apps.identity, (1,))
    b = dfk.submit(apps.add, (a, 10))
    c = dfk.submit(apps.mul, (a, 5))
    out.append(dfk.submit(apps.add, (b, c)).result())


def _pipeline(dfk, out):
    from .codec import FileRef
    d = tempfile.mkdtemp(prefix="pilotflow-pipeline-")
    src = os.path.join(d, "in.txt")
    with open(src, "w") as fh:
        fh.write("Hello World\n")
    first = dfk.submit(apps.cat_shell, kwargs={"inputs": [FileRef.parse(src)],
                                               "outputs": [FileRef.parse(os.path.join(d, "a.txt"))]})
    second = dfk.submit(apps.cat_shell, kwargs={"inputs": [first.outputs[0]],
                                                "outputs": [FileRef.parse(os.path.join(d, "b.txt"))]})
    out.append(dfk.submit(apps.read_text, (second.outputs[0],)).result().rstrip("\n"))


def _fail(dfk, out):
    out.append(dfk.submit(apps.fail, ("demo failure",)).result())


PROGRAMS = {"hello": _hello, "hello_shell": _hello_shell, "diamond": _diamond,
            "pipeline": _pipeline, "fail": _fail}


def _parse_value(tok: str, futures: list):
    if tok.startswith("@") and tok[1:].isdigit():
        i = int(tok[1:])
        if i >= len(futures):
            raise ConfigError("program", f"reference {tok} to a later task")
        return futures[i]
    try:
        return json.loads(tok)
    except ValueError:
        return tok


def resolve_app(name: str):
    """A built-in app by short name, or any app as ``module:attribute``."""
    import importlib
    from .errors import UnknownApp
    from .tasks import App
    module, sep, attr = name.rpartition(":")
    try:
        obj = getattr(importlib.import_module(module) if sep else apps, attr, None)
    except ImportError:
        obj = None
    if not isinstance(obj, App):
        raise UnknownApp(f"app {name!r} is not registered", name=name)
    return obj


def parse_task_list(text: str):
    """Lines of ``app arg ... key=value``; ``@k`` is the result of line k (0-based)."""
    tasks = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        toks = shlex.split(line)
        tasks.append((lineno, toks[0], toks[1:]))
    return tasks


def run_task_list(dfk, path, out):
    with open(path, encoding="utf-8") as fh:
        entries = parse_task_list(fh.read())
    futures = []
    for lineno, name, toks in entries:
        args, kwargs = [], {}
        for t in toks:
            key, eq, val = t.partition("=")
            if eq and key.isidentifier():
                kwargs[key] = _parse_value(val, futures)
            else:
                args.append(_parse_value(t, futures))
        futures.append(dfk.submit(resolve_app(name), tuple(args), kwargs))
    failed = 0
    for i, f in enumerate(futures):
        try:
            out.append(f"{i}\t{json.dumps(f.result(), default=str)}")
        except Exception as e:
            failed += 1
            out.append(f"{i}\tERROR {type(e).__name__}: {e}")
    if failed:
        raise _TasksFailed(failed)


class _TasksFailed(Exception):
    pass


def cmd_run(args) -> int:
    from .config import build_kernel, default_config, load_config
    targets = args.target
    if len(targets) > 2:
        raise ConfigError("run", "expected [CONFIG] PROGRAM")
    config_path = targets[0] if len(targets) == 2 else args.config
    program = targets[-1]
    cfg = load_config(config_path) if config_path else default_config("local")
    if program not in PROGRAMS and not os.path.isfile(program):
        raise ConfigError("program", f"unknown program {program!r} "
                          f"(built-ins: {', '.join(sorted(PROGRAMS))})")
    dfk = build_kernel(cfg, monitor_log=args.monitor_log, seed=args.seed)
    out: list = []
    code = EXIT_OK
    try:
        if program in PROGRAMS:
            PROGRAMS[program](dfk, out)
        else:
            run_task_list(dfk, program, out)
    except _TasksFailed:
        code = EXIT_TASK_FAILED
    except ConfigError:
        raise
    except Exception as e:
        out.append(f"ERROR {type(e).__name__}: {e}")
        code = EXIT_TASK_FAILED
    finally:
        summary = dfk.wait_all()
        dfk.shutdown()
    for line in out:
        print(line)
    if summary["failed"]:
        code = EXIT_TASK_FAILED
    logging.getLogger(__name__).info("summary %s", summary)
    return code


def _ms_list(text: str) -> list[float]:
    """``0,10,100,1000ms`` or ``0,0.5s`` to seconds."""
    text = text.strip()
    scale = 1e-3
    if text.endswith("ms"):
        text = text[:-2]
    elif text.endswith("s"):
        text, scale = text[:-1], 1.0
    return [float(x) * scale for x in text.split(",") if x.strip()]


def cmd_bench(args) -> int:
    from . import bench
    from .config import load_config
    cfg = load_config(args.config) if args.config else None
    if args.experiment == "latency":
        report = bench.latency(args.executor, args.tasks, config=cfg, seed=args.seed)
    elif args.experiment == "throughput":
        report = bench.throughput(args.executor, args.tasks, args.workers,
                                  duration=args.duration_ms / 1e3, prefetch=args.prefetch,
                                  config=cfg, seed=args.seed)
    elif args.experiment == "scaling":
        workers = [int(w) for w in args.workers_list.split(",")]
        report = bench.scaling(args.mode, _ms_list(args.durations), workers, args.tasks,
                               args.executor, seed=args.seed)
    else:
        if args.parallelism is not None and not 0.0 < args.parallelism <= 1.0:
            raise ConfigError("strategy.parallelism", "must be in (0, 1]")
        kw = {}
        if cfg is not None:
            kw.update(parallelism=cfg.strategy.parallelism, poll_period=cfg.strategy.poll_period,
                      idle_timeout=cfg.strategy.idle_timeout)
        for k in ("queue_delay", "idle_timeout", "poll_period", "parallelism"):
            v = getattr(args, k)
            if v is not None:
                kw[k] = v
        report = bench.elasticity(seed=args.seed if args.seed is not None else 0, **kw)
    print(report.format())
    if args.output:
        report.write_csv(args.output)
        report.write_json(os.path.splitext(args.output)[0] + ".json")
    return EXIT_OK


def cmd_report(args) -> int:
    from .monitoring import (IncompleteLog, compute_utilization, read_log, summarize,
                             validate_histories)
    header, events = read_log(args.log)
    hist = validate_histories(events)
    counts = summarize(events)
    print(f"run {header.get('run')} seed {header.get('seed')}")
    print(f"tasks {len(hist)}  succeeded {counts['succeeded']}  failed {counts['failed']}  "
          f"memo_hits {counts['memo_hits']}")
    try:
        u = compute_utilization(events)
        print(f"utilization {u.percent:.2f}%  makespan {u.makespan:.3f}s  "
              f"workers {len(u.lifetimes)}")
    except IncompleteLog as e:
        print(f"utilization unavailable: {e}")
    if args.output:
        import csv
        with open(args.output, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task_id", "states"])
            for tid, states in sorted(hist.items()):
                w.writerow([tid, " ".join(s.value for s in states)])
    return EXIT_OK if counts["failed"] == 0 else EXIT_TASK_FAILED


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # sub-commands accept the global flags too; their defaults are suppressed
    # so a flag given before the verb is not reset by the sub-parser
    d = {"default": argparse.SUPPRESS} if suppress else {}
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", help="YAML run configuration", **d)
    g.add_argument("--seed", type=int, help="PRNG seed for executor selection and matching", **d)
    g.add_argument("--monitor-log", help="write the monitor log here", **d)
    g.add_argument("--output", help="CSV report path", **d)
    g.add_argument("-v", "--verbose", action="store_true", **d)
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(True)
    p = argparse.ArgumentParser(prog="pilotflow", parents=[_global_flags(False)],
                                description="Dataflow task execution and benchmarks.")
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", parents=[common], help="run a program")
    r.add_argument("target", nargs="+", metavar="[CONFIG] PROGRAM",
                   help=f"built-in program ({', '.join(sorted(PROGRAMS))}) or task-list file")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", parents=[common], help="run a benchmark")
    bsub = b.add_subparsers(dest="experiment", required=True)
    lat = bsub.add_parser("latency", parents=[common])
    lat.add_argument("--executor", default="htex")
    lat.add_argument("--tasks", type=int, default=1000)
    thr = bsub.add_parser("throughput", parents=[common])
    thr.add_argument("--executor", default="htex")
    thr.add_argument("--tasks", type=int, default=10000)
    thr.add_argument("--workers", type=int, default=4)
    thr.add_argument("--prefetch", type=int, default=16)
    thr.add_argument("--duration-ms", type=float, default=0.0)
    sc = bsub.add_parser("scaling", parents=[common])
    sc.add_argument("--mode", choices=("strong", "weak"), default="strong")
    sc.add_argument("--durations", default="0,10,100,1000ms")
    sc.add_argument("--workers", dest="workers_list", default="1,2,4,8,16,32")
    sc.add_argument("--tasks", type=int, default=64)
    sc.add_argument("--executor", default="htex")
    el = bsub.add_parser("elasticity", parents=[common])
    el.add_argument("--queue-delay", type=float)
    el.add_argument("--idle-timeout", type=float)
    el.add_argument("--poll-period", type=float)
    el.add_argument("--parallelism", type=float)
    b.set_defaults(func=cmd_bench)

    rep = sub.add_parser("report", parents=[common], help="summarize a monitor log")
    rep.add_argument("log")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
