"""Link, cost and packet model shared by both transports."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

TCPIP_HEADER = 40
MAX_RECORD_PLAINTEXT = 16384
RECORD_HEADER = 5
RECORD_TAG = 16
RECORD_OVERHEAD = RECORD_HEADER + RECORD_TAG

ESP_OUTER_IP = 20
ESP_HEADER = 8
ESP_IV = 16
ESP_ICV = 16
ESP_INNER_TCP = 20
ESP_TRAILER = 2
ESP_BLOCK = 16
ESP_FIXED = ESP_OUTER_IP + ESP_HEADER + ESP_IV + ESP_ICV

# handshake message sizes: client hello, server hello, client finished, server finished
HANDSHAKE_SIZES = (64, 128, 80, 48)
RECORD_HANDSHAKE_WIRE_BYTES = sum(HANDSHAKE_SIZES) + TCPIP_HEADER * len(HANDSHAKE_SIZES)

NS = 1_000_000_000


class SecurityMode(enum.Enum):
    PLAIN = "plain"
    RECORD_LAYER = "ssl"
    PACKET_LAYER = "ipsec"

    @classmethod
    def parse(cls, token):
        try:
            return cls(token)
        except ValueError:
            raise ValueError(f"unknown security mode {token!r}") from None

    @property
    def label(self):
        return {"plain": "Plain", "ssl": "RecordLayer", "ipsec": "PacketLayer"}[self.value]

    @property
    def protocol(self):
        """Trace protocol label for frames of this mode."""
        return {"plain": "TCP", "ssl": "RECORD", "ipsec": "ESP"}[self.value]


@dataclass(frozen=True)
class LinkParams:
    one_way_delay: float = 0.001
    bandwidth: float | None = 1e9  # bits/s, None = unlimited
    mtu: int = 1500

    def __post_init__(self):
        if self.one_way_delay < 0:
            raise ValueError("one_way_delay must be >= 0")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be > 0 or None")
        if self.mtu < 576:
            raise ValueError("mtu must be >= 576")

    @property
    def delay_ns(self):
        return round(self.one_way_delay * NS)

    def serialization_ns(self, wire_len):
        if self.bandwidth is None or math.isinf(self.bandwidth):
            return 0
        return round(wire_len * 8 * NS / self.bandwidth)


@dataclass(frozen=True)
class CryptoCostModel:
    per_unit_cost: float = 0.0  # seconds per record / packet
    per_byte_cost: float = 0.0  # seconds per payload byte

    def __post_init__(self):
        if self.per_unit_cost < 0 or self.per_byte_cost < 0:
            raise ValueError("crypto costs must be >= 0")

    @classmethod
    def default_for(cls, mode):
        if mode is SecurityMode.RECORD_LAYER:
            return cls(10e-6, 5e-9)
        if mode is SecurityMode.PACKET_LAYER:
            return cls(50e-6, 5e-9)
        return cls()

    def cost_ns(self, payload_len):
        """Charged once at the sealer and once at the opener."""
        return round((self.per_unit_cost + self.per_byte_cost * payload_len) * NS)


@dataclass
class PseudoPacket:
    src: tuple[str, int]
    dst: tuple[str, int]
    seq: int
    payload: bytes
    wire_len: int
    protocol_label: str
    sealed: bytes | None = None  # the ESP bytes actually on the wire


def packetize(stream_bytes, mtu=1500, src=("0.0.0.0", 0), dst=("0.0.0.0", 0),
              seq_start=0, label="TCP"):
    if mtu < 576:
        raise ValueError("mtu must be >= 576")
    step = mtu - TCPIP_HEADER
    return [
        PseudoPacket(src, dst, seq_start + i, bytes(stream_bytes[off:off + step]),
                     min(step, len(stream_bytes) - off) + TCPIP_HEADER, label)
        for i, off in enumerate(range(0, len(stream_bytes), step))
    ]


def esp_max_payload(mtu):
    """Largest application chunk whose sealed ESP packet still fits in ``mtu``."""
    encrypted = (mtu - ESP_FIXED) // ESP_BLOCK * ESP_BLOCK
    return encrypted - ESP_INNER_TCP - ESP_TRAILER


def esp_encrypted_len(payload_len):
    n = ESP_INNER_TCP + payload_len + ESP_TRAILER
    return -(-n // ESP_BLOCK) * ESP_BLOCK


def esp_wire_len(payload_len):
    return ESP_FIXED + esp_encrypted_len(payload_len)


def _plain_wire(n, mtu):
    return n + TCPIP_HEADER * -(-n // (mtu - TCPIP_HEADER))


def wire_bytes(mode, app_bytes, mtu=1500):
    """Wire bytes needed to carry ``app_bytes`` in one send (handshake excluded)."""
    s = app_bytes
    if s <= 0:
        return 0
    if mode is SecurityMode.PLAIN:
        return _plain_wire(s, mtu)
    if mode is SecurityMode.RECORD_LAYER:
        return _plain_wire(s + RECORD_OVERHEAD * -(-s // MAX_RECORD_PLAINTEXT), mtu)
    chunk = esp_max_payload(mtu)
    full, rest = divmod(s, chunk)
    return full * esp_wire_len(chunk) + (esp_wire_len(rest) if rest else 0)
