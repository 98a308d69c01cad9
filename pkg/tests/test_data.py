import hashlib
import http.server
import os
import threading

import pytest

from pilotflow import DataFlowKernel, DependencyError, FileRef, LocalExecutor, apps, shell_app
from pilotflow.data import stage_http
from pilotflow.errors import ConfigError, OutputMissing, ShellExitError, TransferError
from pilotflow.executors import ExecutionKernel
from pilotflow.executors.htex import HighThroughputExecutor

MIB = bytes((i * 7 + 3) % 256 for i in range(1 << 20))


class _Handler(http.server.BaseHTTPRequestHandler):
    files = {"/big.bin": MIB, "/empty.txt": b"", "/hello.txt": b"Hello World\n"}
    drops = {}

    def do_GET(self):
        if self.path.startswith("/flaky") and self.drops.get(self.path, 0) == 0:
            self.drops[self.path] = 1
            body = self.files["/big.bin"]
            self.send_response(200)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body[:1000])
            self.close_connection = True
            return
        body = self.files.get(self.path.replace("/flaky", "", 1) or self.path)
        if body is None:
            self.send_error(404)
            return
        self.send_response(200)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("X-Checksum-Sha256", hashlib.sha256(body).hexdigest())
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *a):
        pass


@pytest.fixture(scope="module")
def server():
    srv = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    yield f"http://127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()


@pytest.fixture
def dfk(kernels, workdir):
    k = DataFlowKernel([LocalExecutor(workers=2)], seed=0,
                       staging_dir=os.path.join(workdir, "staged"))
    kernels.append(k)
    return k


def test_stage_one_mib_digest(server, workdir):
    ref = stage_http(FileRef.parse(server + "/big.bin"), workdir)
    assert ref.staged
    with open(ref.local_path, "rb") as fh:
        data = fh.read()
    assert hashlib.sha256(data).digest() == hashlib.sha256(MIB).digest()
    digest = hashlib.sha256(MIB).hexdigest()
    assert os.path.basename(ref.local_path) == f"{digest[:16]}_big.bin"


def test_stage_zero_bytes(server, workdir):
    ref = stage_http(FileRef.parse(server + "/empty.txt"), workdir)
    assert os.path.getsize(ref.local_path) == 0


def test_stage_404(server, workdir):
    with pytest.raises(TransferError) as ei:
        stage_http(FileRef.parse(server + "/missing"), workdir)
    assert ei.value.detail["status"] == 404
    assert not [f for f in os.listdir(workdir) if f.startswith(".partial")]


def test_dropped_connection_retried(server, workdir, kernels):
    k = DataFlowKernel([LocalExecutor()], seed=0, retries=1,
                       staging_dir=os.path.join(workdir, "staged"))
    kernels.append(k)
    ref = FileRef.parse(server + "/flaky/hello.txt")
    f = k.submit(apps.read_text, (ref,))
    assert f.result(30) == "Hello World\n"
    stage = [r for r in k.tasks.values() if r.task_id != f.task_id][0]
    assert stage.launches == 2


def test_local_existing_file_no_stage_task(dfk, workdir):
    path = os.path.join(workdir, "in.txt")
    with open(path, "w") as fh:
        fh.write("local\n")
    assert dfk.submit(apps.read_text, (FileRef.parse(path),)).result(10) == "local\n"
    assert dfk.data_manager.stage_tasks == 0
    assert len(dfk.tasks) == 1


def test_three_consumers_share_one_stage_task(server, dfk):
    ref = FileRef.parse(server + "/hello.txt")
    futs = [dfk.submit(apps.read_text, (ref,)) for _ in range(3)]
    assert [f.result(30) for f in futs] == ["Hello World\n"] * 3
    assert dfk.data_manager.stage_tasks == 1
    stage_ids = {r.task_id for r in dfk.tasks.values()} - {f.task_id for f in futs}
    assert len(stage_ids) == 1
    assert all(dfk.tasks[f.task_id].depends_on == stage_ids for f in futs)


def test_404_fails_dependents_naming_uri(server, dfk):
    uri = server + "/nope.txt"
    f = dfk.submit(apps.read_text, (FileRef.parse(uri),))
    with pytest.raises(DependencyError) as ei:
        f.result(30)
    assert uri in str(ei.value)
    assert ei.value.detail["cause"] == "TransferError"


def test_resolve_files_idempotent(server, dfk):
    dm = dfk.data_manager
    ref = FileRef.parse(server + "/hello.txt")
    a1, _ = dm.resolve_files((ref,), {}, "local")
    a2, _ = dm.resolve_files((ref,), {}, "local")
    assert a1[0] is a2[0]
    assert dm.stage_tasks == 1
    staged = a1[0].result(30)
    a3, _ = dm.resolve_files((staged,), {}, "local")
    assert a3[0] is staged and dm.stage_tasks == 1


def _pipeline(dfk, d):
    src = os.path.join(d, "in.txt")
    with open(src, "w") as fh:
        fh.write("Hello World\n")
    first = dfk.submit(apps.cat_shell, kwargs={"inputs": [FileRef.parse(src)],
                                               "outputs": [os.path.join(d, "a.txt")]})
    second = dfk.submit(apps.cat_shell, kwargs={"inputs": [first.outputs[0]],
                                                "outputs": [os.path.join(d, "b.txt")]})
    return dfk.submit(apps.read_text, (second.outputs[0],)).result(60)


def test_declared_output_pipeline(dfk, workdir):
    assert _pipeline(dfk, workdir) == "Hello World\n"


def test_output_missing(dfk, workdir):
    out = os.path.join(workdir, "never.txt")
    f = dfk.submit(shell_app("true"), kwargs={"outputs": [out]})
    f.result(10)
    with pytest.raises(OutputMissing):
        f.outputs[0].result(10)
    g = dfk.submit(apps.read_text, (f.outputs[0],))
    with pytest.raises(DependencyError) as ei:
        g.result(10)
    assert ei.value.detail["cause"] == "OutputMissing"


def test_crash_before_writing(dfk, workdir):
    f = dfk.submit(shell_app("exit 4"), kwargs={"outputs": [os.path.join(workdir, "x.txt")]})
    with pytest.raises(ShellExitError):
        f.outputs[0].result(10)


def test_duplicate_output_rejected(dfk, workdir):
    out = os.path.join(workdir, "dup.txt")
    dfk.submit(shell_app("touch {outputs[0]}"), kwargs={"outputs": [out]})
    with pytest.raises(ConfigError):
        dfk.submit(shell_app("touch {outputs[0]}"), kwargs={"outputs": [out]})


def test_location_independence(kernels, workdir):
    contents = []
    for name, ex in (("local", LocalExecutor(
                         kernel=ExecutionKernel(sandbox_root=os.path.join(workdir, "sb1")))),
                     ("htex", HighThroughputExecutor(
                         sandbox_root=os.path.join(workdir, "sb2")))):
        k = DataFlowKernel([ex], seed=0)
        kernels.append(k)
        d = os.path.join(workdir, name)
        os.makedirs(d)
        contents.append(_pipeline(k, d))
    assert contents[0] == contents[1] == "Hello World\n"
