"""Kill a manager mid-run and watch its tasks finish elsewhere through retries."""

import os
import signal
import time

from pilotflow import DataFlowKernel, apps
from pilotflow.executors.htex import HighThroughputExecutor
from pilotflow.providers import LocalProvider


def main():
    provider = LocalProvider(init_blocks=2, max_blocks=2)
    ex = HighThroughputExecutor(provider=provider, workers_per_node=4,
                                heartbeat_period=0.5, heartbeat_threshold=1.5)
    dfk = DataFlowKernel([ex], retries=1, seed=0)
    try:
        ex.wait_for_managers(2)
        futs = [dfk.submit(apps.sleep_then, (1.0, i)) for i in range(8)]
        time.sleep(0.3)
        victim, info = next(iter(ex.managers.items()))
        print(f"outstanding before kill: {ex.outstanding()}")
        os.killpg(info["pid"], signal.SIGKILL)
        print("results:", [f.result() for f in futs])
        print("lost managers:", ex.lost_managers)
    finally:
        dfk.shutdown()


if __name__ == "__main__":
    main()
