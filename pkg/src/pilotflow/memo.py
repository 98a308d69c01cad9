"""Memo table and its on-disk image, the checkpoint file.

Checkpoint layout: a sequence of records, each a 4-byte big-endian length
followed by a codec-encoded value. The first record is a header map naming
the format version and digest algorithm; every later record is the list
``[digest, value, timestamp]``.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import time
from typing import Any, Iterable

from . import codec
from .errors import CheckpointCorrupt, DecodeError, EncodeError
from .tasks import DIGEST_ALGORITHM

logger = logging.getLogger(__name__)

FORMAT_NAME = "pilotflow-checkpoint"
FORMAT_VERSION = 1
_LEN = struct.Struct(">I")


class MemoTable:
    """Thread-safe digest to result map."""

    def __init__(self, entries: dict[str, Any] | None = None):
        self._entries = dict(entries or {})
        self._lock = threading.Lock()

    def lookup(self, key: str) -> tuple[bool, Any]:
        with self._lock:
            if key in self._entries:
                return True, self._entries[key]
        return False, None

    def store(self, key: str, value: Any) -> None:
        with self._lock:
            self._entries[key] = value

    def update(self, other: MemoTable) -> None:
        with other._lock:
            items = dict(other._entries)
        with self._lock:
            self._entries.update(items)

    def __contains__(self, key):
        return key in self._entries

    def __len__(self):
        return len(self._entries)

    def keys(self):
        return list(self._entries)


def _header() -> bytes:
    body = codec.encode({
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "digest": DIGEST_ALGORITHM,
    })
    return _LEN.pack(len(body)) + body


class CheckpointStore:
    """Append-only checkpoint writer; each append is flushed immediately."""

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        self._lock = threading.Lock()
        keep = _complete_prefix(self.path) if os.path.exists(self.path) else 0
        self._fh = open(self.path, "ab")
        if self._fh.tell() != keep:
            # drop a torn tail left by a crashed run before appending
            self._fh.truncate(keep)
            self._fh.seek(keep)
        if keep == 0:
            self._fh.write(_header())
            self._fh.flush()
        self.records_written = 0

    def append(self, key: str, value: Any, ts: float | None = None) -> bool:
        try:
            body = codec.encode([key, value, time.time() if ts is None else ts])
        except EncodeError as e:
            logger.warning("result for %s not checkpointed: %s", key[:12], e)
            return False
        rec = _LEN.pack(len(body)) + body
        with self._lock:
            self._fh.write(rec)
            self._fh.flush()
            self.records_written += 1
        return True

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()


def _complete_prefix(path: str) -> int:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    while len(data) - pos >= 4:
        (n,) = _LEN.unpack_from(data, pos)
        if len(data) - pos - 4 < n:
            break
        pos += 4 + n
    return pos


def read_checkpoint(path: str | os.PathLike) -> list[tuple[str, Any, float]]:
    """Parse one checkpoint file.

    A truncated final record is dropped; a complete record that fails to
    decode, or a bad header, raises :class:`CheckpointCorrupt`.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    records = []
    pos = 0
    first = True
    while pos < len(data):
        if len(data) - pos < 4:
            break
        (n,) = _LEN.unpack_from(data, pos)
        if len(data) - pos - 4 < n:
            break
        try:
            rec = codec.decode(data[pos + 4:pos + 4 + n])
        except DecodeError as e:
            raise CheckpointCorrupt(f"{path}: record at byte {pos}: {e}") from None
        pos += 4 + n
        if first:
            first = False
            if not isinstance(rec, dict) or rec.get("format") != FORMAT_NAME:
                raise CheckpointCorrupt(f"{path}: missing checkpoint header")
            if rec.get("digest") != DIGEST_ALGORITHM:
                raise CheckpointCorrupt(
                    f"{path}: digest {rec.get('digest')!r} != {DIGEST_ALGORITHM}")
            continue
        if not (isinstance(rec, list) and len(rec) == 3 and isinstance(rec[0], str)):
            raise CheckpointCorrupt(f"{path}: malformed record before byte {pos}")
        records.append((rec[0], rec[1], rec[2]))
    return records


def load_checkpoints(paths: Iterable[str | os.PathLike]) -> MemoTable:
    """Merge checkpoint files into one table; later records and files win."""
    table = MemoTable()
    for p in paths:
        for key, value, _ts in read_checkpoint(p):
            table.store(key, value)
    return table
