"""Random DAG programs, run both on a kernel and on the serial reference."""

import random

from pilotflow import apps
from pilotflow.dflow import Ref, serial_reference
from pilotflow.errors import AppError, DependencyError

OPS = ("add", "scale", "identity", "pair")


def random_program(rng: random.Random, n: int, poison: int):
    """``n`` task specs ``(op, dep indices, constant, poisoned)``."""
    bad = set(rng.sample(range(n), min(poison, n)))
    prog = []
    for i in range(n):
        k = rng.randrange(0, min(i, 3) + 1)
        deps = rng.sample(range(i), k) if k else []
        op = rng.choice(OPS)
        if op in ("scale", "identity"):
            deps = deps[:1]
        prog.append((op, deps, rng.randrange(-5, 6), i in bad))
    return prog


def _call(op, deps, c, bad):
    if bad:
        return apps.fail, (["poisoned", *deps],)
    if op == "add":
        return apps.add, (*deps, c)
    if op == "scale":
        return apps.mul, (deps[0] if deps else c, 3)
    if op == "identity":
        return apps.identity, (deps[0] if deps else c,)
    return apps.add, (*deps, c, 1)


def reference_results(prog):
    tasks = []
    for op, deps, c, bad in prog:
        app, args = _call(op, [Ref(d) for d in deps], c, bad)
        tasks.append((app.fn, args, {}))
    return serial_reference(tasks)


def submit_program(dfk, prog):
    futs = []
    for op, deps, c, bad in prog:
        app, args = _call(op, [futs[d] for d in deps], c, bad)
        futs.append(dfk.submit(app, args))
    return futs


def downstream_closure(prog, roots):
    bad = set(roots)
    for i, (_, deps, _, _) in enumerate(prog):
        if any(d in bad for d in deps):
            bad.add(i)
    return bad


def check_against_reference(dfk, prog, futs):
    """Return a list of mismatch descriptions (empty when all agree)."""
    ref = reference_results(prog)
    problems = []
    for i, (f, want) in enumerate(zip(futs, ref)):
        exc = f.exception(timeout=120)
        if isinstance(want, BaseException):
            expect = DependencyError if isinstance(want, DependencyError) else AppError
            if not isinstance(exc, expect):
                problems.append(f"task {i}: expected {expect.__name__}, got {exc!r}")
        elif exc is not None or f.result() != want:
            problems.append(f"task {i}: expected {want!r}, got {exc or f.result()!r}")
    return problems


def edge_violations(dfk, prog, futs):
    out = []
    for i, (_, deps, _, _) in enumerate(prog):
        v = dfk.tasks[futs[i].task_id]
        if v.launch_time is None:
            continue
        for d in deps:
            u = dfk.tasks[futs[d].task_id]
            if u.complete_time is None or u.complete_time > v.launch_time:
                out.append((d, i))
    return out
