"""Real stream transport over TCP sockets, wall-clock timed.

Plain mode writes the application stream as-is; the record mode writes the
handshake messages and then records; the packet mode writes sealed ESP
packets back to back (each is self-delimiting through its outer IP header).
Each endpoint traces its own outbound frames at send time.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time

from ..errors import HandshakeError, IntegrityError, IpstorError, StartupError, TransportError
from ..trace import Trace
from .layer import SecureLayer
from .model import SecurityMode

log = logging.getLogger(__name__)


class TcpEndpoint:
    def __init__(self, sock, layer, trace, epoch_ns, timeout=30.0):
        # timeout None blocks forever (target side: idle sessions are fine)
        self.sock = sock
        self.layer = layer
        self.local = layer.local
        self.remote = layer.remote
        self.trace = trace
        self.epoch_ns = epoch_ns
        self.closed = False
        self.delivered = 0
        self._seq = 0
        self._send_lock = threading.Lock()
        sock.settimeout(timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def now_ns(self):
        return time.monotonic_ns() - self.epoch_ns

    def _recv_exact(self, n):
        buf = bytearray()
        while len(buf) < n:
            chunk = self._read(n - len(buf))
            if not chunk:
                raise HandshakeError("connection closed during handshake")
            buf += chunk
        return bytes(buf)

    def _read(self, n=65536):
        try:
            return self.sock.recv(n)
        except socket.timeout:
            raise TransportError("receive timed out") from None
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from None

    def _write(self, data):
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from None

    def _send_handshake(self, msg):
        packet, event = self.layer.handshake_frame(msg, self._seq)
        self._seq += 1
        self.trace.record(event(self.now_ns()))
        self._write(msg)

    def handshake(self):
        layer = self.layer
        if layer.mode is not SecurityMode.RECORD_LAYER:
            return
        hs = layer.handshake
        if layer.is_client:
            self._send_handshake(hs.start())
        while not layer.established:
            reply = layer.handshake_receive(self._recv_exact(hs.expected_size()))
            if reply is not None:
                self._send_handshake(reply)

    def send(self, data, note=None):
        if self.closed:
            raise TransportError("connection closed")
        with self._send_lock:
            units = self.layer.seal(data)
            if not units:
                return
            frames = self.layer.frames(units, data, self._seq)
            self._seq += len(frames)
            stamp = self.now_ns()
            for event in self.layer.frame_events(frames, note, [stamp] * len(frames)):
                self.trace.record(event)
            self._write(b"".join(w for w, _ in units))

    def recv(self):
        """Return the next application bytes; ``b""`` at end of stream."""
        while True:
            chunk = self._read()
            if not chunk:
                if self.layer.reader.pending:
                    raise IntegrityError("stream truncated mid-record")
                return b""
            data = b"".join(self.layer.reader.feed(chunk))
            if data:
                self.delivered += len(data)
                return data

    def serve(self, on_data, on_close=None):
        """Blocking receive loop (target side)."""
        try:
            while not self.closed:
                data = self.recv()
                if not data:
                    break
                on_data(data)
        except IpstorError as exc:
            log.info("%s:%d connection aborted: %s", *self.local, exc)
        finally:
            self.close()
            if on_close is not None:
                on_close()

    def close(self):
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    abort = close


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class _Listener:
    def __init__(self, server, thread):
        self._server = server
        self._thread = thread
        self.address = server.server_address[:2]

    def close(self):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)


class TcpNetwork:
    transport = "tcp"

    def __init__(self, mode=SecurityMode.PLAIN, mtu=1500, *, trace=None, psk=None,
                 timeout=30.0):
        self.mode = mode
        self.mtu = mtu
        self.trace = trace if trace is not None else Trace()
        self.psk = psk
        self.timeout = timeout
        self.epoch_ns = time.monotonic_ns()
        self._endpoints = set()
        self._lock = threading.Lock()

    def now_ns(self):
        return time.monotonic_ns() - self.epoch_ns

    def _endpoint(self, sock, is_client, psk):
        local = sock.getsockname()[:2]
        remote = sock.getpeername()[:2]
        layer = SecureLayer(self.mode, is_client=is_client, local=local, remote=remote,
                            mtu=self.mtu, psk=psk if psk is not None else self.psk)
        return TcpEndpoint(sock, layer, self.trace, self.epoch_ns,
                           self.timeout if is_client else None)

    def listen(self, addr, on_accept, psk=None):
        net = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                ep = net._endpoint(self.request, False, psk)
                with net._lock:
                    net._endpoints.add(ep)
                try:
                    ep.handshake()
                    on_accept(ep)
                except IpstorError as exc:
                    log.info("connection from %s:%d failed: %s", *ep.remote, exc)
                finally:
                    ep.close()
                    with net._lock:
                        net._endpoints.discard(ep)

        try:
            server = _Server((addr[0], int(addr[1])), Handler)
        except OSError as exc:
            raise StartupError(f"cannot listen on {addr[0]}:{addr[1]}: {exc}") from None
        thread = threading.Thread(target=server.serve_forever, name="ipstor-tcp-accept",
                                  daemon=True)
        thread.start()
        return _Listener(server, thread)

    def connect(self, addr, psk=None):
        try:
            sock = socket.create_connection((addr[0], int(addr[1])), timeout=self.timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {addr[0]}:{addr[1]}: {exc}") from None
        ep = self._endpoint(sock, True, psk)
        try:
            ep.handshake()
        except IpstorError:
            ep.close()
            raise
        return ep

    def close_all(self):
        with self._lock:
            eps = list(self._endpoints)
        for ep in eps:
            ep.close()
