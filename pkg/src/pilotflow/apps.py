"""Built-in apps used by the CLI programs, benchmarks and fault-injection tests.

Every app here is registered under ``pilotflow.apps:<name>`` so remote
workers resolve it by importing this module.
"""

from __future__ import annotations

import fcntl
import os
import time

from .tasks import native_app, shell_app


@native_app
def hello(name):
    return "Hello {}".format(name)


@native_app
def noop():
    return None


@native_app
def sleep(seconds: float):
    time.sleep(seconds)
    return seconds


@native_app
def identity(x):
    return x


@native_app
def add(*xs):
    return sum(xs)


@native_app
def mul(a, b):
    return a * b


@native_app
def concat(*parts, sep=""):
    return sep.join(str(p) for p in parts)


@native_app
def fail(message="injected failure"):
    raise RuntimeError(message)


@native_app
def fail_first(counter_path: str, failures: int, value=None):
    """Raise on the first ``failures`` invocations, then return ``value``.

    The invocation count lives in ``counter_path`` so it survives across
    worker processes.
    """
    with open(counter_path, "a+") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        fh.seek(0)
        n = int(fh.read() or 0) + 1
        fh.seek(0)
        fh.truncate()
        fh.write(str(n))
    if n <= failures:
        raise RuntimeError(f"planned failure {n} of {failures}")
    return value


@native_app
def sleep_then(seconds: float, value=None):
    time.sleep(seconds)
    return value


@native_app
def env(*names):
    return {n: os.environ.get(n) for n in names}


@native_app
def pid():
    return os.getpid()


@native_app
def read_text(path):
    with open(os.fspath(path)) as fh:
        return fh.read()


hello_shell = shell_app("echo 'Hello {0}'", name="hello_shell")
cat_shell = shell_app("cat {inputs[0]} > {outputs[0]}", name="cat_shell")
