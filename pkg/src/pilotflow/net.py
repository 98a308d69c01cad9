"""Socket plumbing for length-framed messages."""

from __future__ import annotations

import errno
import socket
import threading
import time

from .codec import FrameBuffer, frame


class Conn:
    """Non-blocking framed connection driven by a selector loop."""

    def __init__(self, sock: socket.socket, peer=None):
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self.peer = peer
        self.inbuf = FrameBuffer()
        self.outbuf = bytearray()
        self.closed = False
        self.role: str | None = None
        self.ident = None

    def fileno(self):
        return self.sock.fileno()

    def read(self) -> tuple[list[dict], bool]:
        """Frames now available, and whether the peer is still connected."""
        chunks = []
        alive = True
        while True:
            try:
                data = self.sock.recv(1 << 18)
            except (BlockingIOError, InterruptedError):
                break
            except OSError:
                alive = False
                break
            if not data:
                alive = False
                break
            chunks.append(data)
            if len(data) < (1 << 18):
                break
        if not chunks:
            return [], alive
        return self.inbuf.feed(b"".join(chunks)), alive

    def send(self, msg: dict) -> bool:
        return self.send_raw(frame(msg))

    def send_raw(self, data: bytes) -> bool:
        if self.closed:
            return False
        self.outbuf += data
        return self.flush()

    def flush(self) -> bool:
        """Write what the kernel accepts; False if the peer is gone."""
        while self.outbuf:
            try:
                n = self.sock.send(self.outbuf)
            except (BlockingIOError, InterruptedError):
                return True
            except OSError:
                self.closed = True
                return False
            del self.outbuf[:n]
        return True

    def close(self):
        self.closed = True
        try:
            self.sock.close()
        except OSError:
            pass


class BlockingConn:
    """Thread-safe sender plus single-reader receiver over a blocking socket."""

    def __init__(self, sock: socket.socket):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self.inbuf = FrameBuffer()
        self._send_lock = threading.Lock()
        self._pending: list[dict] = []

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 10.0) -> BlockingConn:
        deadline = time.time() + timeout
        while True:
            try:
                s = socket.create_connection((host, port), timeout=max(0.1, deadline - time.time()))
                s.settimeout(None)
                return cls(s)
            except OSError as e:
                if time.time() >= deadline or e.errno not in (
                        errno.ECONNREFUSED, errno.ECONNRESET, errno.ETIMEDOUT, None):
                    raise
                time.sleep(0.05)

    def send(self, msg: dict) -> None:
        data = frame(msg)
        with self._send_lock:
            self.sock.sendall(data)

    def recv(self, timeout: float | None = None) -> dict | None:
        """Next frame, or ``None`` on EOF. Raises ``socket.timeout``."""
        while not self._pending:
            if self.sock.gettimeout() != timeout:
                self.sock.settimeout(timeout)
            data = self.sock.recv(1 << 18)
            if not data:
                return None
            self._pending.extend(self.inbuf.feed(data))
        return self._pending.pop(0)

    def recv_many(self, timeout: float | None = None) -> list[dict] | None:
        """All frames available after at least one arrives; ``None`` on EOF."""
        if self._pending:
            out, self._pending = self._pending, []
            return out
        if self.sock.gettimeout() != timeout:
            self.sock.settimeout(timeout)
        while True:
            data = self.sock.recv(1 << 18)
            if not data:
                return None
            got = self.inbuf.feed(data)
            if got:
                return got

    def request(self, msg: dict, timeout: float | None = 30.0) -> dict:
        """Synchronous request/reply (used on command channels)."""
        with self._send_lock:
            self.sock.sendall(frame(msg))
            reply = self.recv(timeout)
        if reply is None:
            raise ConnectionError("peer closed the command channel")
        return reply

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def listen(host: str = "127.0.0.1", port: int = 0, backlog: int = 512) -> socket.socket:
    s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    s.bind((host, port))
    s.listen(backlog)
    s.setblocking(False)
    return s
