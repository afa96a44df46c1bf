"""User-space ESP transport-mode emulation over pseudo-IP packets.

Packet layout::

    outer IPv4 header (20) | SPI (4) | seq (4) | IV (16)
    | AES-128-CBC( inner TCP segment | pad | pad_len | next_header ) | ICV (16)

The ICV is HMAC-SHA256 over ESP header, IV and ciphertext, truncated to 16
bytes. The outer header is protected by its own checksum only.
"""

from __future__ import annotations

import hmac
import ipaddress
import os
import struct
from dataclasses import dataclass, field
from hashlib import sha256

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from ..errors import Incomplete, IntegrityError, ProtocolError, ReplayError
from .model import (ESP_BLOCK, ESP_FIXED, ESP_HEADER, ESP_ICV, ESP_INNER_TCP,
                    ESP_IV, ESP_OUTER_IP, ESP_TRAILER)

PROTO_ESP = 50
NEXT_HEADER_TCP = 6
PSK_ENV = "IPSTOR_PSK"
# used when neither configuration nor environment supply a key
DEFAULT_PSK = sha256(b"ipstor default pre-shared key").digest()

_IP = struct.Struct("!BBHHHBBH4s4s")
_ESP = struct.Struct("!II")
_TCP = struct.Struct("!HHIIBBHHH")


def load_psk(value=None, environ=None):
    """Parse a hex-encoded 32-byte key from ``value`` or ``$IPSTOR_PSK``."""
    if value is None:
        value = (os.environ if environ is None else environ).get(PSK_ENV)
    if value is None:
        return DEFAULT_PSK
    try:
        key = bytes.fromhex(value.strip())
    except ValueError:
        raise ValueError(f"{PSK_ENV} is not valid hex") from None
    if len(key) != 32:
        raise ValueError(f"{PSK_ENV} must encode exactly 32 bytes")
    return key


def _ip4(host):
    try:
        return ipaddress.IPv4Address(host).packed
    except ValueError:
        return bytes(4)


def ip_checksum(header):
    total = sum(struct.unpack(f"!{len(header) // 2}H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


@dataclass
class EspSA:
    """One direction of a security association."""
    spi: int
    enc_key: bytes
    auth_key: bytes
    iv_key: bytes
    src: tuple[str, int] = ("0.0.0.0", 0)
    dst: tuple[str, int] = ("0.0.0.0", 0)
    seq: int = 0                  # last sequence number sent
    highest: int = 0              # highest sequence number accepted
    tcp_seq: int = field(default=0, repr=False)


def derive_sas(psk, client, server):
    """Return ``(client_to_server, server_to_client)`` SAs from a pre-shared key."""
    def one(label, spi, src, dst):
        k = HKDF(hashes.SHA256(), 64, None, b"ipstor esp " + label).derive(psk)
        return EspSA(spi, k[:16], k[16:48], k[48:64], src, dst)
    return (one(b"c2s", 0x00001001, client, server),
            one(b"s2c", 0x00002001, server, client))


def inner_segment(payload, sa):
    """Prefix ``payload`` with the 20-byte pseudo TCP header for this SA."""
    header = _TCP.pack(sa.src[1], sa.dst[1], sa.tcp_seq & 0xFFFFFFFF, 0,
                       0x50, 0x18, 0xFFFF, 0, 0)
    sa.tcp_seq += len(payload)
    return header + bytes(payload)


def seal_packet(inner, sa: EspSA) -> bytes:
    sa.seq += 1
    if sa.seq > 0xFFFFFFFF:
        raise ProtocolError("ESP sequence space exhausted")
    body_len = len(inner) + ESP_TRAILER
    pad = -body_len % ESP_BLOCK
    plaintext = bytes(inner) + bytes(range(1, pad + 1)) + bytes([pad, NEXT_HEADER_TCP])
    esp_header = _ESP.pack(sa.spi, sa.seq)
    iv = hmac.new(sa.iv_key, esp_header, sha256).digest()[:ESP_IV]
    enc = Cipher(algorithms.AES(sa.enc_key), modes.CBC(iv)).encryptor()
    ciphertext = enc.update(plaintext) + enc.finalize()
    protected = esp_header + iv + ciphertext
    icv = hmac.new(sa.auth_key, protected, sha256).digest()[:ESP_ICV]
    total = ESP_OUTER_IP + len(protected) + ESP_ICV
    ip = bytearray(_IP.pack(0x45, 0, total, sa.seq & 0xFFFF, 0, 64, PROTO_ESP, 0,
                            _ip4(sa.src[0]), _ip4(sa.dst[0])))
    ip[10:12] = ip_checksum(bytes(ip)).to_bytes(2, "big")
    return bytes(ip) + protected + icv


def packet_length(data):
    """Length of the packet at the front of ``data`` (verifies the IP header)."""
    if len(data) < ESP_OUTER_IP:
        raise Incomplete(ESP_OUTER_IP)
    header = bytes(data[:ESP_OUTER_IP])
    if ip_checksum(header) != 0:
        raise IntegrityError("outer IP header checksum mismatch")
    ver_ihl, _, total, _, _, _, proto, _, _, _ = _IP.unpack(header)
    if ver_ihl != 0x45 or proto != PROTO_ESP:
        raise ProtocolError("not an ESP packet")
    if total < ESP_FIXED + ESP_BLOCK or (total - ESP_FIXED) % ESP_BLOCK:
        raise ProtocolError(f"bad ESP packet length {total}")
    if len(data) < total:
        raise Incomplete(total)
    return total


def open_packet(data, sa: EspSA) -> bytes:
    """Verify, replay-check and decrypt one packet; returns the inner segment."""
    n = packet_length(data)
    if n != len(data):
        raise ProtocolError("open_packet expects exactly one packet")
    data = bytes(data)
    protected, icv = data[ESP_OUTER_IP:-ESP_ICV], data[-ESP_ICV:]
    expected = hmac.new(sa.auth_key, protected, sha256).digest()[:ESP_ICV]
    if not hmac.compare_digest(icv, expected):
        raise IntegrityError("ESP integrity check failed")
    spi, seq = _ESP.unpack_from(protected, 0)
    if spi != sa.spi:
        raise IntegrityError(f"no SA for SPI 0x{spi:08x}")
    if seq <= sa.highest:
        raise ReplayError(f"sequence {seq} not above {sa.highest}")
    iv = protected[ESP_HEADER:ESP_HEADER + ESP_IV]
    dec = Cipher(algorithms.AES(sa.enc_key), modes.CBC(iv)).decryptor()
    plaintext = dec.update(protected[ESP_HEADER + ESP_IV:]) + dec.finalize()
    pad, next_header = plaintext[-2], plaintext[-1]
    if next_header != NEXT_HEADER_TCP or pad + ESP_TRAILER > len(plaintext) or \
            plaintext[-2 - pad:-2] != bytes(range(1, pad + 1)):
        raise ProtocolError("bad ESP padding")
    inner = plaintext[:-2 - pad]
    if len(inner) < ESP_INNER_TCP:
        raise ProtocolError("inner segment too short")
    sa.highest = seq
    return inner


class EspReader:
    def __init__(self, sa):
        self.sa = sa
        self._buf = bytearray()

    def feed(self, chunk):
        """Return the application payload of every packet completed by ``chunk``."""
        self._buf += chunk
        out = []
        while True:
            try:
                n = packet_length(self._buf)
            except Incomplete:
                break
            out.append(open_packet(self._buf[:n], self.sa)[ESP_INNER_TCP:])
            del self._buf[:n]
        return out

    @property
    def pending(self):
        return len(self._buf)
