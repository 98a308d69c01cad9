"""Four-stage sleep workflow on a simulated batch scheduler, static vs elastic.

Takes about half a minute. Prints utilization, makespan and the block timeline.
"""

from pilotflow import bench


def main():
    report = bench.elasticity(seed=0)
    print(report.format())
    static, elastic = report.runs
    for run in (static, elastic):
        steps = " ".join(f"{t:.1f}s:{n}" for t, n in run.timeline)
        print(f"{run.label} blocks  {steps}")


if __name__ == "__main__":
    main()
