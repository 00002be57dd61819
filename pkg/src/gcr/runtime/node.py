"""Non-blocking stream-socket endpoint speaking the envelope framing.

One :class:`Node` per process. It may listen for inbound peers and open
outbound connections; both kinds are :class:`Conn` objects with a frame
reader and an outbound byte queue. ``poll`` drives all sockets once.
"""

from __future__ import annotations

import errno
import logging
import selectors
import socket
import time

from gcr.protocol import Envelope, FrameReader

log = logging.getLogger(__name__)


class ConnectionLost(ConnectionError):
    pass


def parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {text!r}")
    return host, int(port)


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


class Conn:
    def __init__(self, sock: socket.socket, name: str):
        self.sock = sock
        self.name = name
        self.reader = FrameReader()
        self.out = bytearray()
        self.closed = False

    @property
    def backlog(self) -> int:
        return len(self.out)


class Node:
    def __init__(self, name: str, listen: str | None = None):
        self.name = name
        self.sel = selectors.DefaultSelector()
        self.conns: list[Conn] = []
        self.listener = None
        self.address = None
        if listen:
            host, port = parse_addr(listen)
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            srv.bind((host, port))
            srv.listen(16)
            srv.setblocking(False)
            self.listener = srv
            self.address = srv.getsockname()
            self.sel.register(srv, selectors.EVENT_READ, None)

    def connect(self, peer: str, addr: str, timeout: float = 60.0) -> Conn:
        host, port = parse_addr(addr)
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=1.0)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise ConnectionLost(f"{self.name}: cannot reach {peer} at {addr}")
                time.sleep(0.05)
        return self._add(sock, peer)

    def _add(self, sock: socket.socket, name: str) -> Conn:
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = Conn(sock, name)
        self.conns.append(conn)
        self.sel.register(sock, selectors.EVENT_READ, conn)
        return conn

    def send(self, conn: Conn, frame: bytes):
        if conn.closed:
            raise ConnectionLost(f"{self.name}: connection to {conn.name} is closed")
        conn.out += frame
        self._write(conn)

    def _write(self, conn: Conn):
        while conn.out and not conn.closed:
            try:
                n = conn.sock.send(conn.out)
            except (BlockingIOError, InterruptedError):
                break
            except OSError as exc:
                self._close(conn, exc)
                return
            del conn.out[:n]
        events = selectors.EVENT_READ | (selectors.EVENT_WRITE if conn.out else 0)
        if not conn.closed:
            self.sel.modify(conn.sock, events, conn)

    def _close(self, conn: Conn, reason=None):
        if conn.closed:
            return
        conn.closed = True
        log.debug("%s: connection to %s closed (%s)", self.name, conn.name, reason)
        try:
            self.sel.unregister(conn.sock)
        except (KeyError, ValueError):
            pass
        conn.sock.close()

    def poll(self, timeout: float = 0.0) -> list[tuple[Conn, Envelope]]:
        """Accept, read and write once; returns received envelopes in arrival order."""
        received = []
        for key, events in self.sel.select(timeout):
            if key.data is None:
                try:
                    sock, peer = self.listener.accept()
                except BlockingIOError:
                    continue
                self._add(sock, f"inbound:{peer[1]}")
                continue
            conn: Conn = key.data
            if events & selectors.EVENT_WRITE:
                self._write(conn)
            if events & selectors.EVENT_READ and not conn.closed:
                while True:
                    try:
                        data = conn.sock.recv(1 << 20)
                    except (BlockingIOError, InterruptedError):
                        break
                    except OSError as exc:
                        if exc.errno not in (errno.ECONNRESET, errno.EPIPE):
                            log.warning("%s: recv from %s failed: %s", self.name, conn.name, exc)
                        self._close(conn, exc)
                        break
                    if not data:
                        self._close(conn, "eof")
                        break
                    received.extend((conn, env) for env in conn.reader.feed(data))
        return received

    def pending_output(self) -> int:
        return sum(c.backlog for c in self.conns if not c.closed)

    def flush(self, timeout: float = 30.0) -> bool:
        deadline = time.monotonic() + timeout
        while self.pending_output():
            if time.monotonic() > deadline:
                return False
            self.poll(0.01)
        return True

    def close(self):
        for c in self.conns:
            self._close(c, "shutdown")
        if self.listener is not None:
            self.sel.unregister(self.listener)
            self.listener.close()
        self.sel.close()
