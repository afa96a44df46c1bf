"""Mode-specific sealing and framing, shared by the mem and tcp transports."""

from __future__ import annotations

import bisect
import os
from dataclasses import dataclass

from ..errors import TransportError
from ..trace import Direction, FrameEvent, port_name, segment_info
from . import esp, record
from .model import (HANDSHAKE_SIZES, RECORD_HEADER, TCPIP_HEADER, PseudoPacket,
                    SecurityMode, esp_max_payload, packetize)

HANDSHAKE_NAMES = ("Client Hello", "Server Hello", "Client Finished", "Server Finished")


@dataclass
class Frame:
    packet: PseudoPacket
    app_lo: int  # application byte range carried, relative to the send
    app_hi: int
    unit: int    # index of the last sealed unit this frame depends on


class _PlainReader:
    pending = 0

    def feed(self, chunk):
        return [bytes(chunk)] if chunk else []


class SecureLayer:
    """Per-endpoint security state: sealing outbound sends, opening inbound bytes."""

    def __init__(self, mode, *, is_client, local, remote, mtu=1500, psk=None,
                 randbytes=os.urandom):
        self.mode = mode
        self.is_client = is_client
        self.local = local
        self.remote = remote
        self.mtu = mtu
        self.handshake = None
        self.reader = None
        self._send_keys = None
        self._send_sa = None
        if mode is SecurityMode.RECORD_LAYER:
            self.handshake = record.RecordHandshake(is_client, randbytes)
        elif mode is SecurityMode.PACKET_LAYER:
            client, server = (local, remote) if is_client else (remote, local)
            c2s, s2c = esp.derive_sas(psk if psk is not None else esp.load_psk(), client, server)
            self._send_sa, recv_sa = (c2s, s2c) if is_client else (s2c, c2s)
            self.reader = esp.EspReader(recv_sa)
            self._esp_chunk = esp_max_payload(mtu)
        else:
            self.reader = _PlainReader()

    @property
    def established(self):
        return self.reader is not None

    def handshake_receive(self, msg):
        reply = self.handshake.receive(msg)
        if self.handshake.done:
            self._send_keys = self.handshake.send_keys
            self.reader = record.RecordReader(self.handshake.recv_keys)
        return reply

    def handshake_frame(self, msg, seq):
        name = HANDSHAKE_NAMES[HANDSHAKE_SIZES.index(len(msg))]
        pkt = PseudoPacket(self.local, self.remote, seq, msg, len(msg) + TCPIP_HEADER, "RECORD")
        direction = Direction.I2T if self.is_client else Direction.T2I
        return pkt, lambda t: FrameEvent(t, self.local, self.remote, "RECORD",
                                         f"Handshake: {name}", pkt.wire_len, 0, direction)

    def seal(self, data):
        """Protect one send; returns ``[(unit_bytes, app_len)]`` in wire order."""
        if not self.established:
            raise TransportError("security handshake not complete")
        if self.mode is SecurityMode.PLAIN:
            return [(bytes(data), len(data))] if data else []
        if self.mode is SecurityMode.RECORD_LAYER:
            return record.seal_stream(data, self._send_keys)
        sa = self._send_sa
        step = self._esp_chunk
        return [(esp.seal_packet(esp.inner_segment(data[off:off + step], sa), sa),
                 min(step, len(data) - off))
                for off in range(0, len(data), step)]

    def frames(self, units, data, seq):
        """Cut sealed units into pseudo-packets with their application ranges."""
        label = self.mode.protocol
        if self.mode is SecurityMode.PACKET_LAYER:
            out, off = [], 0
            for i, (wire, n) in enumerate(units):
                pkt = PseudoPacket(self.local, self.remote, seq + i, bytes(data[off:off + n]),
                                   len(wire), label, sealed=wire)
                out.append(Frame(pkt, off, off + n, i))
                off += n
            return out
        header = RECORD_HEADER if self.mode is SecurityMode.RECORD_LAYER else 0
        stream = b"".join(w for w, _ in units)
        ends, regions = [], []
        pos = app = 0
        for wire, n in units:
            regions.append((pos + header, pos + header + n, app))
            pos += len(wire)
            app += n
            ends.append(pos)
        out, a = [], 0
        for pkt in packetize(stream, self.mtu, self.local, self.remote, seq, label):
            b = a + len(pkt.payload)
            first = bisect.bisect_right(ends, a)
            last = bisect.bisect_right(ends, b - 1)
            lo = hi = None
            for lo_s, hi_s, app0 in regions[first:last + 1]:
                s, e = max(a, lo_s), min(b, hi_s)
                if s < e:
                    lo = app0 + s - lo_s if lo is None else lo
                    hi = app0 + e - lo_s
            if lo is None:
                lo = hi = regions[first][2]
            out.append(Frame(pkt, lo, hi, last))
            a = b
        return out

    def frame_events(self, frames, note, stamps):
        """Trace events for one send; ``stamps`` gives one timestamp per frame."""
        direction = Direction.I2T if self.is_client else Direction.T2I
        events = []
        for i, (f, t) in enumerate(zip(frames, stamps)):
            last = i == len(frames) - 1
            if note is None:
                payload = f.app_hi - f.app_lo
                info = (f"{port_name(self.local[1])} > {port_name(self.remote[1])} "
                        f"[PSH, ACK] Len={payload}") if last else segment_info(f.packet.protocol_label)
                tag = None
            else:
                lo, hi = note.data_range if note.data_range is not None else (f.app_lo, f.app_hi)
                payload = max(0, min(hi, f.app_hi) - max(lo, f.app_lo))
                info = note.summary if last else segment_info(f.packet.protocol_label)
                tag = note.task_tag
            label = f.packet.protocol_label
            if last and note is not None and self.mode is SecurityMode.PLAIN:
                label = "iSCSI"
            events.append(FrameEvent(t, self.local, self.remote, label, info,
                                     f.packet.wire_len, payload, direction, tag))
        return events
