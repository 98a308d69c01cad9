"""Submit a few apps, chain them through futures, and read a shell app's output."""

import os
import tempfile

from pilotflow import DataFlowKernel, LocalExecutor, native_app, shell_app


@native_app
def square(x):
    return x * x


@native_app
def total(*xs):
    return sum(xs)


echo = shell_app("echo 'sum of squares: {0}'")


def main():
    dfk = DataFlowKernel([LocalExecutor(workers=4)], seed=0)
    try:
        squares = [dfk.submit(square, (i,)) for i in range(10)]
        s = dfk.submit(total, tuple(squares))
        out = os.path.join(tempfile.mkdtemp(), "out.txt")
        dfk.submit(echo, (s,), {"stdout": out}).result()
        print(open(out).read().strip())
    finally:
        dfk.shutdown()


if __name__ == "__main__":
    main()
