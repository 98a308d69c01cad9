import os
import subprocess
import sys

import pytest

from pilotflow.cli import main, parse_task_list, resolve_app
from pilotflow.errors import UnknownApp


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_hello(capsys):
    assert _run(capsys, "run", "hello") == (0, "Hello World\n", "")


def test_hello_shell(capsys):
    code, out, _ = _run(capsys, "run", "hello_shell")
    assert (code, out) == (0, "Hello World\n")


def test_failing_program_exits_one(capsys):
    code, out, _ = _run(capsys, "run", "fail")
    assert code == 1 and "demo failure" in out


def test_unknown_program(capsys):
    code, _, err = _run(capsys, "run", "nosuch")
    assert code == 2 and "program" in err


def test_usage_error(capsys):
    assert _run(capsys, "frobnicate")[0] == 2


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)
    return path


def test_duplicate_label_config(capsys, workdir):
    cfg = _write(os.path.join(workdir, "dup.yaml"),
                 "executors:\n  - {label: a, type: local}\n  - {label: a, type: local}\n")
    code, _, err = _run(capsys, "run", cfg, "hello")
    assert code == 2 and "executors[1].label" in err


def test_same_program_under_htex(capsys, workdir):
    cfg = _write(os.path.join(workdir, "htex.yaml"),
                 "executors:\n  - label: htex\n    type: htex\n    workers_per_node: 2\n")
    results = [_run(capsys, "run", "diamond")[1], _run(capsys, "run", cfg, "diamond")[1],
               _run(capsys, "--config", cfg, "run", "diamond")[1]]
    assert results == ["16\n"] * 3


def test_pipeline(capsys):
    assert _run(capsys, "run", "pipeline")[:2] == (0, "Hello World\n")


def test_task_list(capsys, workdir):
    tl = _write(os.path.join(workdir, "tasks.txt"),
                "# comment\nidentity 4\nmul @0 5\nconcat a b sep=-\n"
                "pilotflow.apps:add @1 1\n")
    code, out, _ = _run(capsys, "run", tl)
    assert code == 0
    assert out.splitlines() == ["0\t4", "1\t20", "2\t\"a-b\"", "3\t21"]


def test_task_list_failure(capsys, workdir):
    tl = _write(os.path.join(workdir, "tasks.txt"), "fail boom\nidentity 1\n")
    code, out, _ = _run(capsys, "run", tl)
    assert code == 1
    assert "ERROR AppError" in out and "1\t1" in out


def test_resolve_app():
    assert resolve_app("mul").spec.name == "pilotflow.apps:mul"
    assert resolve_app("pilotflow.apps:noop").spec.name == "pilotflow.apps:noop"
    with pytest.raises(UnknownApp):
        resolve_app("nope")
    with pytest.raises(UnknownApp):
        resolve_app("no.such.module:x")
    assert parse_task_list("\n# x\nadd 1 2\n") == [(3, "add", ["1", "2"])]


def test_monitor_log_and_report(capsys, workdir):
    log = os.path.join(workdir, "m.log")
    assert _run(capsys, "--monitor-log", log, "run", "diamond")[0] == 0
    csv_path = os.path.join(workdir, "r.csv")
    code, out, _ = _run(capsys, "report", log, "--output", csv_path)
    assert code == 0
    assert "tasks 4  succeeded 4  failed 0" in out
    assert "utilization" in out
    assert len(open(csv_path).read().splitlines()) == 5


def test_bench_latency_and_output(capsys, workdir):
    out_csv = os.path.join(workdir, "lat.csv")
    code, out, _ = _run(capsys, "bench", "latency", "--executor", "local", "--tasks", "1",
                        "--output", out_csv)
    assert code == 0 and "median_ms" in out
    assert len(open(out_csv).read().splitlines()) == 2
    assert os.path.exists(os.path.join(workdir, "lat.json"))


def test_bench_throughput_zero(capsys):
    code, out, _ = _run(capsys, "bench", "throughput", "--executor", "local", "--tasks", "0")
    assert code == 0 and "n: 0" in out


def test_bench_scaling_small(capsys):
    code, out, _ = _run(capsys, "bench", "scaling", "--executor", "local", "--durations",
                        "0,20ms", "--workers", "1,2", "--tasks", "4")
    assert code == 0 and "completion_s" in out


def test_bench_elasticity_rejects_zero_parallelism(capsys):
    code, _, err = _run(capsys, "bench", "elasticity", "--parallelism", "0")
    assert code == 2 and "strategy.parallelism" in err


def test_console_script():
    out = subprocess.run([sys.executable, "-m", "pilotflow.cli", "run", "hello"],
                         capture_output=True, text=True, timeout=60)
    assert out.returncode == 0 and out.stdout == "Hello World\n"
