"""Binary codec for task arguments, results, wire frames and checkpoints.

Every value is ``tag (1 byte) | length (4 bytes, big-endian) | payload``.
Containers nest recursively; map entries are ordered by their encoded key so
the encoding of a value is canonical and can be hashed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Any

from .errors import DecodeError, EncodeError, TaskError, rebuild_error

T_NULL = 0x00
T_BOOL = 0x01
T_INT = 0x02
T_BIGINT = 0x03
T_FLOAT = 0x04
T_STR = 0x05
T_BYTES = 0x06
T_LIST = 0x07
T_MAP = 0x08
T_FILE = 0x09
T_STATUS = 0x0A
T_ERROR = 0x0B

_HEAD = struct.Struct(">BI")
_LEN = struct.Struct(">I")
_I64 = struct.Struct(">q")
_F64 = struct.Struct(">d")
_INT_MIN, _INT_MAX = -(2**63), 2**63 - 1


class UnixStatus(int):
    """Exit status of a shell app."""

    def __repr__(self):
        return f"UnixStatus({int(self)})"


@dataclass(frozen=True)
class FileRef:
    """Reference to a file that may need staging before an app can read it.

    ``scheme`` is ``"local"`` or ``"http"``. After staging ``local_path`` is
    a readable path on the execution resource.
    """

    scheme: str
    uri: str
    local_path: str | None = None
    staged: bool = False

    @classmethod
    def parse(cls, url: str) -> FileRef:
        if url.startswith(("http://", "https://")):
            return cls("http", url)
        if url.startswith("file://"):
            url = url[len("file://"):]
        return cls("local", url, local_path=url)

    @property
    def filepath(self) -> str:
        """Path an app should open; translated after staging."""
        return self.local_path if self.local_path is not None else self.uri

    def __fspath__(self):
        return self.filepath

    def __str__(self):
        return self.filepath


def _head(tag: int, payload: bytes) -> bytes:
    return _HEAD.pack(tag, len(payload)) + payload


def _enc(v: Any, out: list) -> None:
    t = type(v)
    if v is None:
        out.append(_HEAD.pack(T_NULL, 0))
    elif t is bool:
        out.append(_HEAD.pack(T_BOOL, 1) + (b"\x01" if v else b"\x00"))
    elif t is int:
        if _INT_MIN <= v <= _INT_MAX:
            out.append(_HEAD.pack(T_INT, 8) + _I64.pack(v))
        else:
            n = (v.bit_length() + 8) // 8
            out.append(_head(T_BIGINT, v.to_bytes(n, "big", signed=True)))
    elif t is float:
        out.append(_HEAD.pack(T_FLOAT, 8) + _F64.pack(v))
    elif t is str:
        out.append(_head(T_STR, v.encode("utf-8", "surrogatepass")))
    elif t is bytes or t is bytearray or t is memoryview:
        out.append(_head(T_BYTES, bytes(v)))
    elif t is list or t is tuple:
        _container(T_LIST, v, out)
    elif t is dict:
        _map(v, out)
    elif t is UnixStatus:
        out.append(_HEAD.pack(T_STATUS, 8) + _I64.pack(int(v)))
    elif t is FileRef:
        _container(T_FILE, (v.scheme, v.uri, v.local_path, v.staged), out)
    elif isinstance(v, TaskError):
        _container(T_ERROR, (type(v).__name__, v.message, v.detail), out)
    else:
        raise EncodeError(f"cannot encode object of type {t.__name__}")


def _container(tag: int, items, out: list) -> None:
    idx = len(out)
    out.append(None)
    for item in items:
        _enc(item, out)
    size = sum(len(p) for p in out[idx + 1:])
    out[idx] = _HEAD.pack(tag, size)


def _map(d: dict, out: list) -> None:
    entries = []
    for k, val in d.items():
        kparts: list = []
        _enc(k, kparts)
        if kparts[0][0] in (T_LIST, T_MAP):
            raise EncodeError("map keys must be scalars")
        vparts: list = []
        _enc(val, vparts)
        entries.append((b"".join(kparts), b"".join(vparts)))
    entries.sort(key=lambda e: e[0])
    body = b"".join(k + v for k, v in entries)
    out.append(_head(T_MAP, body))


def encode(v: Any) -> bytes:
    """Encode a value. Raises :class:`EncodeError` for unsupported objects."""
    out: list = []
    _enc(v, out)
    return b"".join(out)


def _dec(buf: memoryview, pos: int, end: int) -> tuple[Any, int]:
    if pos + 5 > end:
        raise DecodeError(f"truncated header at offset {pos}")
    tag, n = _HEAD.unpack_from(buf, pos)
    pos += 5
    stop = pos + n
    if stop > end:
        raise DecodeError(f"payload of {n} bytes overruns buffer at offset {pos}")
    if tag == T_NULL:
        if n:
            raise DecodeError("null with payload")
        return None, stop
    if tag == T_BOOL:
        if n != 1 or buf[pos] > 1:
            raise DecodeError("bad bool")
        return buf[pos] == 1, stop
    if tag == T_INT or tag == T_STATUS:
        if n != 8:
            raise DecodeError("bad int width")
        i = _I64.unpack_from(buf, pos)[0]
        return (UnixStatus(i) if tag == T_STATUS else i), stop
    if tag == T_BIGINT:
        return int.from_bytes(buf[pos:stop], "big", signed=True), stop
    if tag == T_FLOAT:
        if n != 8:
            raise DecodeError("bad float width")
        return _F64.unpack_from(buf, pos)[0], stop
    if tag == T_STR:
        try:
            return str(buf[pos:stop], "utf-8", "surrogatepass"), stop
        except UnicodeDecodeError as e:
            raise DecodeError(str(e)) from None
    if tag == T_BYTES:
        return bytes(buf[pos:stop]), stop
    if tag in (T_LIST, T_FILE, T_ERROR):
        items = []
        p = pos
        while p < stop:
            item, p = _dec(buf, p, stop)
            items.append(item)
        if tag == T_LIST:
            return items, stop
        if tag == T_FILE:
            if len(items) != 4:
                raise DecodeError("bad file reference")
            return FileRef(*items), stop
        if len(items) != 3 or not isinstance(items[2], dict):
            raise DecodeError("bad error record")
        return rebuild_error(*items), stop
    if tag == T_MAP:
        d = {}
        p = pos
        while p < stop:
            k, p = _dec(buf, p, stop)
            if p >= stop:
                raise DecodeError("map key without value")
            d[k], p = _dec(buf, p, stop)
        return d, stop
    raise DecodeError(f"unknown tag 0x{tag:02x} at offset {pos - 5}")


def decode(b: bytes) -> Any:
    """Decode exactly one value; trailing bytes are an error."""
    buf = memoryview(b)
    try:
        v, pos = _dec(buf, 0, len(buf))
    except (struct.error, TypeError, ValueError) as e:
        raise DecodeError(str(e)) from None
    if pos != len(buf):
        raise DecodeError(f"{len(buf) - pos} trailing bytes")
    return v


def frame(msg: dict) -> bytes:
    """Wire frame: 4-byte big-endian length, then the encoded message map."""
    if "type" not in msg:
        raise EncodeError("wire message without 'type'")
    body = encode(msg)
    return _LEN.pack(len(body)) + body


class FrameBuffer:
    """Accumulates stream bytes and yields complete decoded frames."""

    def __init__(self, max_frame: int = 1 << 30):
        self._buf = bytearray()
        self.max_frame = max_frame

    def feed(self, data: bytes) -> list[dict]:
        self._buf += data
        buf = self._buf
        out = []
        pos = 0
        while len(buf) - pos >= 4:
            (n,) = _LEN.unpack_from(buf, pos)
            if n > self.max_frame:
                raise DecodeError(f"frame of {n} bytes exceeds limit")
            if len(buf) - pos - 4 < n:
                break
            msg = decode(bytes(buf[pos + 4:pos + 4 + n]))
            pos += 4 + n
            if not isinstance(msg, dict) or "type" not in msg:
                raise DecodeError("frame is not a typed message")
            out.append(msg)
        if pos:
            del buf[:pos]
        return out

    def pending(self) -> int:
        return len(self._buf)
