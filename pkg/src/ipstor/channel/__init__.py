"""Transport stack beneath iSCSI: packetization, security modes, links."""

from .esp import EspSA, derive_sas, load_psk, open_packet, seal_packet
from .layer import SecureLayer
from .mem import MemEndpoint, MemNetwork, Simulator
from .model import (RECORD_HANDSHAKE_WIRE_BYTES, CryptoCostModel, LinkParams, PseudoPacket,
                    SecurityMode, esp_max_payload, packetize, wire_bytes)
from .record import RecordHandshake, RecordKeys, open_record, seal_record
from .tcp import TcpEndpoint, TcpNetwork

__all__ = [
    "CryptoCostModel", "EspSA", "LinkParams", "MemEndpoint", "MemNetwork", "PseudoPacket",
    "RECORD_HANDSHAKE_WIRE_BYTES", "RecordHandshake", "RecordKeys", "SecureLayer",
    "SecurityMode", "Simulator", "TcpEndpoint", "TcpNetwork", "derive_sas", "esp_max_payload",
    "load_psk", "open_packet", "open_record", "packetize", "seal_packet", "seal_record",
    "wire_bytes", "make_network",
]


def make_network(transport, mode, link=None, costs=None, **kw):
    """Build a ``mem`` or ``tcp`` network for ``mode``."""
    if transport == "mem":
        return MemNetwork(mode, link, costs, **kw)
    if transport == "tcp":
        kw.pop("seed", None)
        kw.pop("tamper", None)
        return TcpNetwork(mode, (link or LinkParams()).mtu, **kw)
    raise ValueError(f"unknown transport {transport!r}")
