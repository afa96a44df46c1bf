"""Deterministic in-memory transport driven by a discrete-event virtual clock.

Time is kept in integer nanoseconds. A packet sent at ``t`` reaches the peer's
stack at::

    max(t, sender CPU free) + seal cost   (queued behind earlier seals)
    -> max(ready, link free) + wire_len*8/bandwidth + one-way delay
    -> max(arrival, receiver CPU free) + open cost   (delivered upward)

The trace is captured at the initiator host: initiator frames are stamped
when they start onto the link, target frames when they arrive.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random

from ..errors import HandshakeError, IntegrityError, IpstorError, TransportError
from ..trace import Trace
from .layer import SecureLayer
from .model import CryptoCostModel, LinkParams, SecurityMode

log = logging.getLogger(__name__)

FIRST_CLIENT_PORT = 50387


class Simulator:
    def __init__(self):
        self.now = 0
        self._queue = []
        self._seq = itertools.count()

    def schedule(self, when, fn, *args):
        if when < self.now:
            raise ValueError("cannot schedule in the past")
        heapq.heappush(self._queue, (when, next(self._seq), fn, args))

    def step(self):
        if not self._queue:
            return False
        when, _, fn, args = heapq.heappop(self._queue)
        self.now = when
        fn(*args)
        return True

    def run(self):
        while self.step():
            pass

    @property
    def idle(self):
        return not self._queue


class _Host:
    def __init__(self):
        self.cpu_free = 0


class _Listener:
    def __init__(self, net, addr, on_accept, psk):
        self.net = net
        self.address = addr
        self.on_accept = on_accept
        self.psk = psk

    def close(self):
        self.net._listeners.pop(self.address, None)


class MemNetwork:
    """A simulated LAN: one link per connection, one CPU per host."""

    transport = "mem"

    def __init__(self, mode=SecurityMode.PLAIN, link=None, costs=None, *, trace=None,
                 psk=None, seed=0, tamper=None):
        self.mode = mode
        self.link = link or LinkParams()
        if costs is None:
            costs = CryptoCostModel.default_for(mode)
        if mode is SecurityMode.PLAIN:
            costs = CryptoCostModel()
        self.costs = costs
        self.trace = trace if trace is not None else Trace()
        self.psk = psk
        self.rng = random.Random(seed)
        self.tamper = tamper
        self.sim = Simulator()
        self._listeners = {}
        self._hosts = {}
        self._next_port = FIRST_CLIENT_PORT

    def now_ns(self):
        return self.sim.now

    def host(self, name):
        return self._hosts.setdefault(name, _Host())

    def listen(self, addr, on_accept, psk=None):
        addr = (addr[0], int(addr[1]))
        if addr in self._listeners:
            raise TransportError(f"{addr[0]}:{addr[1]} already in use")
        listener = _Listener(self, addr, on_accept, psk if psk is not None else self.psk)
        self._listeners[addr] = listener
        return listener

    def connect(self, addr, local_host="192.168.2.2", psk=None):
        listener = self._listeners.get((addr[0], int(addr[1])))
        if listener is None:
            raise TransportError(f"connection refused by {addr[0]}:{addr[1]}")
        local = (local_host, self._next_port)
        self._next_port += 1
        remote = listener.address
        client = MemEndpoint(self, SecureLayer(
            self.mode, is_client=True, local=local, remote=remote, mtu=self.link.mtu,
            psk=psk if psk is not None else self.psk, randbytes=self.rng.randbytes))
        server = MemEndpoint(self, SecureLayer(
            self.mode, is_client=False, local=remote, remote=local, mtu=self.link.mtu,
            psk=listener.psk, randbytes=self.rng.randbytes))
        client.peer, server.peer = server, client
        listener.on_accept(server)
        client.handshake()
        return client

    def inject(self, endpoint, packet):
        """Deliver ``packet`` to ``endpoint`` right now (replay testing)."""
        self.sim.schedule(self.sim.now, endpoint._on_packet, packet)


class MemEndpoint:
    def __init__(self, net, layer):
        self.net = net
        self.layer = layer
        self.local = layer.local
        self.remote = layer.remote
        self.host = net.host(layer.local[0])
        self.peer = None
        self.closed = False       # we closed or aborted
        self.peer_closed = False  # orderly close from the peer
        self.error = None
        self.reset = False
        self.delivered = 0
        self._rx = bytearray()
        self._hs_buf = bytearray()
        self._on_data = None
        self._on_close = None
        self._tx_free = 0
        self._seq = 0
        self._inflight = 0   # deliveries scheduled but not yet run
        self._last_delivery = 0

    # -- public API ------------------------------------------------------------

    def now_ns(self):
        return self.net.sim.now

    def handshake(self):
        """Run the in-band key agreement to completion (client side)."""
        if self.layer.mode is not SecurityMode.RECORD_LAYER:
            return
        self._transmit_handshake(self.layer.handshake.start())
        sim = self.net.sim
        while not self.layer.established:
            if self.error is not None:
                if isinstance(self.error, HandshakeError):
                    raise self.error
                raise HandshakeError(f"handshake aborted: {self.error}")
            if not sim.step():
                raise HandshakeError("handshake stalled")

    def send(self, data, note=None):
        if self.closed or self.peer_closed:
            raise TransportError("connection closed")
        units = self.layer.seal(data)
        if not units:
            return
        costs = self.net.costs
        t = max(self.net.sim.now, self.host.cpu_free)
        ready = []
        for _, app_len in units:
            t += costs.cost_ns(app_len)
            ready.append(t)
        self.host.cpu_free = t
        frames = self.layer.frames(units, data, self._seq)
        self._seq += len(frames)
        stamps = []
        for f in frames:
            stamps.append(self._launch(f.packet, ready[f.unit]))
        for event in self.layer.frame_events(frames, note, stamps):
            self.net.trace.record(event)

    def recv(self):
        """Block (advancing virtual time) until application bytes arrive.

        Returns ``b""`` once the peer has closed.
        """
        sim = self.net.sim
        while True:
            if self._rx:
                data = bytes(self._rx)
                self._rx.clear()
                return data
            if self.error is not None:
                if self.reset:
                    raise TransportError(f"connection reset by peer ({self.error})")
                raise self.error
            if self.peer_closed:
                return b""
            if self.closed:
                raise TransportError("connection closed")
            if not sim.step():
                raise TransportError("no response from peer")

    def serve(self, on_data, on_close=None):
        """Register reactive callbacks (target side); returns immediately."""
        self._on_data = on_data
        self._on_close = on_close
        if self._rx:
            self._deliver(b"")

    def close(self):
        if self.closed:
            return
        self.closed = True
        when = max(self.net.sim.now, self._tx_free) + self.net.link.delay_ns
        self.net.sim.schedule(when, self.peer._on_fin)
        self._notify_closed()

    def abort(self, exc):
        if self.closed:
            return
        self.closed = True
        self.error = exc
        self.net.sim.schedule(self.net.sim.now + self.net.link.delay_ns, self.peer._on_reset, exc)
        self._notify_closed()

    # -- internals -------------------------------------------------------------

    def _notify_closed(self):
        cb, self._on_close = self._on_close, None
        if cb is not None:
            cb()

    def _launch(self, packet, ready):
        link = self.net.link
        tx_start = max(ready, self._tx_free)
        self._tx_free = tx_start + link.serialization_ns(packet.wire_len)
        arrival = self._tx_free + link.delay_ns
        if self.net.tamper is not None:
            packet = self.net.tamper(packet) or packet
        self.net.sim.schedule(arrival, self.peer._on_packet, packet)
        return tx_start if self.layer.is_client else arrival

    def _transmit_handshake(self, msg):
        packet, event = self.layer.handshake_frame(msg, self._seq)
        self._seq += 1
        stamp = self._launch(packet, max(self.net.sim.now, self.host.cpu_free))
        self.net.trace.record(event(stamp))

    def _on_packet(self, packet):
        if self.closed:
            return
        try:
            if not self.layer.established:
                self._handshake_bytes(packet.payload)
                return
            pieces = self.layer.reader.feed(
                packet.sealed if packet.sealed is not None else packet.payload)
        except IpstorError as exc:
            log.debug("%s:%d aborting: %s", *self.local, exc)
            self.abort(exc)
            return
        costs = self.net.costs
        t = self.net.sim.now
        for piece in pieces:
            t = max(t, self.host.cpu_free) + costs.cost_ns(len(piece))
            self.host.cpu_free = t
            self._inflight += 1
            self._last_delivery = t
            self.net.sim.schedule(t, self._deliver, piece, True)

    def _handshake_bytes(self, chunk):
        self._hs_buf += chunk
        hs = self.layer.handshake
        while not self.layer.established:
            size = hs.expected_size()
            if size is None or len(self._hs_buf) < size:
                break
            msg = bytes(self._hs_buf[:size])
            del self._hs_buf[:size]
            reply = self.layer.handshake_receive(msg)
            if reply is not None:
                self._transmit_handshake(reply)
        if self._hs_buf and self.layer.established:
            leftover = bytes(self._hs_buf)
            self._hs_buf.clear()
            for piece in self.layer.reader.feed(leftover):
                self._deliver(piece)

    def _deliver(self, piece, scheduled=False):
        if scheduled:
            self._inflight -= 1
        if self.closed:
            return
        self._rx += piece
        self.delivered += len(piece)
        if self._on_data is not None and self._rx:
            data = bytes(self._rx)
            self._rx.clear()
            self._on_data(data)

    def _on_fin(self):
        if self.closed:
            return
        if self._inflight:
            # data ahead of the FIN is still being opened
            self.net.sim.schedule(self._last_delivery, self._on_fin)
            return
        if self.layer.reader is not None and self.layer.reader.pending:
            self.error = IntegrityError("stream truncated mid-record")
        self.peer_closed = True
        if self._on_close is not None:
            self.closed = True
            self._notify_closed()

    def _on_reset(self, exc):
        if self.closed:
            return
        self.error = exc
        self.reset = True
        self.closed = True
        self._notify_closed()
