"""File references and transparent staging.

An unstaged ``http`` input is replaced, at submit time, by the future of a
staging task that downloads it; the consumer therefore depends on the
transfer like on any other task, and receives the staged :class:`FileRef`
(with ``local_path`` set) as its argument.
"""

from __future__ import annotations

import base64
import hashlib
import http.client
import os
import tempfile
import threading
import urllib.error
import urllib.request
from typing import Any

from .codec import FileRef
from .errors import ConfigError, TransferError
from .monitoring import STAGE
from .tasks import native_app

CHUNK = 1 << 16


def _staged_name(digest_hex: str, uri: str) -> str:
    base = os.path.basename(uri.split("?", 1)[0].rstrip("/")) or "download"
    return f"{digest_hex[:16]}_{base}"


def _server_digest(headers) -> str | None:
    """Hex sha256 advertised by the server, if any."""
    for part in (headers.get("Digest") or "").split(","):
        algo, _, val = part.strip().partition("=")
        if algo.lower() == "sha-256" and val:
            try:
                return base64.b64decode(val).hex()
            except ValueError:
                return None
    return headers.get("X-Checksum-Sha256")


def stage_http(ref: FileRef, dest_dir: str, timeout: float = 30.0) -> FileRef:
    """Download ``ref`` into ``dest_dir`` and return the staged reference."""
    os.makedirs(dest_dir, exist_ok=True)
    h = hashlib.sha256()
    size = 0
    fd, tmp = tempfile.mkstemp(dir=dest_dir, prefix=".partial-")
    try:
        with os.fdopen(fd, "wb") as out:
            try:
                with urllib.request.urlopen(ref.uri, timeout=timeout) as resp:
                    expected_len = resp.headers.get("Content-Length")
                    expected_digest = _server_digest(resp.headers)
                    while True:
                        chunk = resp.read(CHUNK)
                        if not chunk:
                            break
                        h.update(chunk)
                        size += len(chunk)
                        out.write(chunk)
            except urllib.error.HTTPError as e:
                raise TransferError(f"GET {ref.uri}: HTTP {e.code}", uri=ref.uri,
                                    status=e.code) from None
            except (urllib.error.URLError, http.client.HTTPException, OSError, ValueError) as e:
                raise TransferError(f"GET {ref.uri}: {e}", uri=ref.uri) from None
        if expected_len is not None and int(expected_len) != size:
            raise TransferError(f"GET {ref.uri}: got {size} of {expected_len} bytes",
                                uri=ref.uri)
        digest = h.hexdigest()
        if expected_digest and expected_digest.lower() != digest:
            raise TransferError(f"GET {ref.uri}: digest mismatch", uri=ref.uri)
        dest = os.path.join(dest_dir, _staged_name(digest, ref.uri))
        os.replace(tmp, dest)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return FileRef(ref.scheme, ref.uri, dest, True)


STAGE_HTTP = native_app(stage_http, name="pilotflow.data:stage_http")


def _walk_files(obj: Any):
    if isinstance(obj, FileRef):
        yield obj
    elif isinstance(obj, (list, tuple)):
        for x in obj:
            yield from _walk_files(x)
    elif isinstance(obj, dict):
        for x in obj.values():
            yield from _walk_files(x)


class DataManager:
    """Inserts staging tasks and tracks declared outputs for one kernel."""

    def __init__(self, dfk, staging_dir: str | None = None):
        self.dfk = dfk
        self.staging_dir = staging_dir or tempfile.mkdtemp(prefix="pilotflow-staged-")
        self._cache: dict[tuple[str, str], Any] = {}
        self._outputs: set[str] = set()
        self._lock = threading.RLock()
        self.stage_tasks = 0

    def needs_staging(self, spec, args, kwargs) -> bool:
        if spec is STAGE_HTTP.spec:
            return False
        return any(f.scheme != "local" and not f.staged
                   for f in _walk_files([args, kwargs]))

    def resolve_files(self, args: tuple, kwargs: dict, executor: str):
        """Return ``(args, kwargs)`` with every unstaged remote file replaced by
        the future of its (cached per uri and executor) staging task."""

        def rewrite(obj):
            if isinstance(obj, FileRef):
                return self._resolve_one(obj, executor)
            if isinstance(obj, list):
                return [rewrite(x) for x in obj]
            if isinstance(obj, tuple):
                return tuple(rewrite(x) for x in obj)
            if isinstance(obj, dict):
                return {k: rewrite(v) for k, v in obj.items()}
            return obj

        return rewrite(args), rewrite(kwargs)

    def _resolve_one(self, ref: FileRef, executor: str):
        if ref.staged:
            return ref
        if ref.scheme == "local":
            if os.path.exists(ref.uri):
                return FileRef("local", ref.uri, ref.uri, True)
            return ref
        if ref.scheme != "http":
            raise ConfigError("inputs", f"unsupported file scheme {ref.scheme!r}")
        key = (ref.uri, executor)
        with self._lock:
            fut = self._cache.get(key)
            if fut is None:
                fut = self.dfk.submit(STAGE_HTTP, (ref, self.staging_dir),
                                      executor=executor, memoize=False)
                self._cache[key] = fut
                self.stage_tasks += 1
                self.dfk.monitor.emit(STAGE, -1, task=fut.task_id, uri=ref.uri,
                                      executor=executor)
        return fut

    def claim_outputs(self, kwargs: dict) -> list[FileRef]:
        outs = kwargs.get("outputs")
        if not outs:
            return []
        refs = []
        for o in outs:
            ref = o if isinstance(o, FileRef) else FileRef.parse(os.fspath(o))
            if ref.scheme != "local":
                raise ConfigError("outputs", f"remote output {ref.uri!r} is not supported")
            path = os.path.abspath(ref.uri)
            refs.append(FileRef("local", path, path, False))
        with self._lock:
            clash = [r.uri for r in refs if r.uri in self._outputs]
            if clash or len({r.uri for r in refs}) != len(refs):
                raise ConfigError("outputs", f"output {(clash or [refs[0].uri])[0]!r} "
                                             "is already declared by another task")
            self._outputs.update(r.uri for r in refs)
        kwargs["outputs"] = refs
        return refs

    @staticmethod
    def staged_output(ref: FileRef) -> FileRef:
        return FileRef("local", ref.uri, ref.local_path or ref.uri, True)
