"""Threaded TCP server and client helpers for length-prefixed JSON frames."""

from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Any, Callable

from optifab import wire

logger = logging.getLogger(__name__)

BACKOFF_BASE = 0.5
BACKOFF_CAP = 30.0


def backoff_delays(base: float = BACKOFF_BASE, cap: float = BACKOFF_CAP):
    delay = base
    while True:
        yield delay
        delay = min(delay * 2.0, cap)


class Connection:
    """A framed socket with a send lock; reads happen on one owner thread."""

    def __init__(self, sock: socket.socket, peer: str = ""):
        self.sock = sock
        self.peer = peer
        self._send_lock = threading.Lock()
        self.closed = False
        self.context: dict[str, Any] = {}

    def send(self, msg: dict) -> bool:
        try:
            with self._send_lock:
                wire.send_frame(self.sock, msg)
            return True
        except OSError:
            self.close()
            return False

    def recv(self) -> dict | None:
        return wire.recv_frame(self.sock)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


Handler = Callable[[Connection, dict], None]


class FrameServer:
    """Accepts connections and calls ``on_message(conn, msg)`` on a per-connection thread.

    ``on_close(conn)`` fires once when the peer goes away.  :meth:`stop`
    drops every connection abruptly, which tests use to simulate a crash.
    """

    def __init__(self, address: str, on_message: Handler, on_close: Callable[[Connection], None] | None = None,
                 name: str = "frame-server"):
        self.host, self.port = wire.parse_address(address)
        self.on_message = on_message
        self.on_close = on_close
        self.name = name
        self._listener: socket.socket | None = None
        self._conns: set[Connection] = set()
        self._lock = threading.Lock()
        self._running = False

    @property
    def address(self) -> str:
        return wire.format_address(self.host, self.port)

    def start(self) -> "FrameServer":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.host, self.port))
        except OSError:
            sock.close()
            raise
        sock.listen(128)
        self.port = sock.getsockname()[1]
        self._listener = sock
        self._running = True
        threading.Thread(target=self._accept_loop, name=f"{self.name}-accept", daemon=True).start()
        return self

    def _accept_loop(self) -> None:
        while self._running:
            try:
                sock, peer = self._listener.accept()
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = Connection(sock, f"{peer[0]}:{peer[1]}")
            with self._lock:
                if not self._running:
                    conn.close()
                    break
                self._conns.add(conn)
            threading.Thread(target=self._serve, args=(conn,), name=f"{self.name}-conn", daemon=True).start()

    def _serve(self, conn: Connection) -> None:
        try:
            while not conn.closed:
                try:
                    msg = conn.recv()
                except (OSError, ValueError):
                    break
                if msg is None:
                    break
                try:
                    self.on_message(conn, msg)
                except Exception:
                    logger.exception("%s: handler failed for %s", self.name, msg.get("type"))
        finally:
            conn.close()
            with self._lock:
                self._conns.discard(conn)
            if self.on_close is not None:
                try:
                    self.on_close(conn)
                except Exception:
                    logger.exception("%s: close handler failed", self.name)

    def stop(self) -> None:
        self._running = False
        if self._listener is not None:
            try:
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._listener.close()
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            conn.close()


def connect(address: str, timeout: float = 5.0) -> Connection:
    host, port = wire.parse_address(address)
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return Connection(sock, address)


def connect_with_backoff(address: str, stop: threading.Event | None = None, base: float = BACKOFF_BASE,
                         cap: float = BACKOFF_CAP, deadline: float | None = None) -> Connection | None:
    """Retry until connected, ``stop`` is set, or ``deadline`` (monotonic) passes."""
    for delay in backoff_delays(base, cap):
        try:
            return connect(address)
        except OSError:
            pass
        if deadline is not None and time.monotonic() + delay > deadline:
            return None
        if stop is not None:
            if stop.wait(delay):
                return None
        else:
            time.sleep(delay)
    return None
