"""Socket-level record protection: AES-128-GCM records plus a 4-message handshake."""

from __future__ import annotations

import hmac
import struct
from hashlib import sha256

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from ..errors import HandshakeError, Incomplete, IntegrityError, ProtocolError
from .model import HANDSHAKE_SIZES, MAX_RECORD_PLAINTEXT, RECORD_HEADER, RECORD_TAG

CONTENT_APPLICATION_DATA = 0x17
RECORD_VERSION = 0x0002
_HEADER = struct.Struct("!BHH")
MAX_RECORD_BODY = MAX_RECORD_PLAINTEXT + RECORD_TAG

CIPHER_LABEL = b"AES-128-GCM".ljust(16, b"\0")
READY_LABEL = b"READY".ljust(16, b"\0")


class RecordKeys:
    """One direction of a record-protected stream."""

    def __init__(self, key, iv):
        if len(key) != 16 or len(iv) != 4:
            raise ValueError("record keys need a 16-byte key and 4-byte IV")
        self._aead = AESGCM(key)
        self._iv = iv
        self.seq = 0

    def _nonce(self):
        nonce = self._iv + self.seq.to_bytes(8, "big")
        self.seq += 1
        return nonce


def seal_record(plaintext, keys: RecordKeys) -> bytes:
    if len(plaintext) > MAX_RECORD_PLAINTEXT:
        raise ValueError("record plaintext exceeds 16384 bytes")
    header = _HEADER.pack(CONTENT_APPLICATION_DATA, RECORD_VERSION,
                          len(plaintext) + RECORD_TAG)
    return header + keys._aead.encrypt(keys._nonce(), bytes(plaintext), header)


def record_length(data):
    """Total length of the record at the front of ``data``."""
    if len(data) < RECORD_HEADER:
        raise Incomplete(RECORD_HEADER)
    _, _, body = _HEADER.unpack_from(data, 0)
    if body > MAX_RECORD_BODY or body < RECORD_TAG:
        raise IntegrityError(f"bad record length {body}")
    if len(data) < RECORD_HEADER + body:
        raise Incomplete(RECORD_HEADER + body)
    return RECORD_HEADER + body


def open_record(data, keys: RecordKeys) -> bytes:
    """Authenticate and decrypt exactly one record."""
    n = record_length(data)
    if n != len(data):
        raise ProtocolError("open_record expects exactly one record")
    header = bytes(data[:RECORD_HEADER])
    kind, version, _ = _HEADER.unpack(header)
    try:
        plaintext = keys._aead.decrypt(keys._nonce(), bytes(data[RECORD_HEADER:]), header)
    except InvalidTag:
        raise IntegrityError("record authentication failed") from None
    # header is bound into the tag, so these only fire on a well-formed forgery
    if kind != CONTENT_APPLICATION_DATA or version != RECORD_VERSION:
        raise IntegrityError("unexpected record type")
    return plaintext


def seal_stream(data, keys):
    """Split ``data`` into records; returns ``[(record_bytes, plaintext_len)]``."""
    return [(seal_record(data[off:off + MAX_RECORD_PLAINTEXT], keys),
             min(MAX_RECORD_PLAINTEXT, len(data) - off))
            for off in range(0, len(data), MAX_RECORD_PLAINTEXT)]


class RecordReader:
    def __init__(self, keys):
        self.keys = keys
        self._buf = bytearray()

    def feed(self, chunk):
        """Return the plaintexts of every record completed by ``chunk``."""
        self._buf += chunk
        out = []
        while True:
            try:
                n = record_length(self._buf)
            except Incomplete:
                break
            out.append(open_record(self._buf[:n], self.keys))
            del self._buf[:n]
        return out

    @property
    def pending(self):
        return len(self._buf)


# --- handshake -----------------------------------------------------------------

def _mac(key, label, *parts):
    return hmac.new(key, label + b"".join(parts), sha256).digest()


def _public(priv):
    return priv.public_key().public_bytes(serialization.Encoding.Raw,
                                          serialization.PublicFormat.Raw)


def _master(priv, peer_pub, client_random, server_random):
    try:
        shared = priv.exchange(X25519PublicKey.from_public_bytes(peer_pub))
    except ValueError as exc:
        raise HandshakeError(f"bad key share: {exc}") from None
    return HKDF(hashes.SHA256(), 32, client_random + server_random,
                b"ipstor record master").derive(shared)


def _expand(master):
    block = HKDF(hashes.SHA256(), 40, None, b"ipstor key expansion").derive(master)
    return (RecordKeys(block[0:16], block[32:36]),
            RecordKeys(block[16:32], block[36:40]))


class RecordHandshake:
    """Both halves of the key agreement; each message has a fixed size.

    Client hello (64):     random | x25519 share
    Server hello (128):    random | x25519 share | session id | server proof
    Client finished (80):  cipher label | session id | client proof
    Server finished (48):  ready label | server proof
    """

    def __init__(self, is_client, randbytes):
        self.is_client = is_client
        self._randbytes = randbytes
        self._priv = X25519PrivateKey.from_private_bytes(randbytes(32))
        self._transcript = b""
        self._master = None
        self.session_id = None
        self.send_keys = None
        self.recv_keys = None
        self.step = 0

    @property
    def done(self):
        return self.send_keys is not None

    def expected_size(self):
        """Size of the next inbound message, or ``None`` when it is our turn."""
        if self.is_client:
            return {1: HANDSHAKE_SIZES[1], 3: HANDSHAKE_SIZES[3]}.get(self.step)
        return {0: HANDSHAKE_SIZES[0], 2: HANDSHAKE_SIZES[2]}.get(self.step)

    def start(self):
        if not self.is_client or self.step:
            raise HandshakeError("only a fresh client starts the handshake")
        msg = self._randbytes(32) + _public(self._priv)
        self._transcript = msg
        self.step = 1
        return msg

    def receive(self, msg):
        """Consume one inbound message; return the reply (or ``None``)."""
        if len(msg) != self.expected_size():
            raise HandshakeError(f"unexpected handshake message of {len(msg)} bytes")
        handler = {(False, 0): self._on_client_hello, (True, 1): self._on_server_hello,
                   (False, 2): self._on_client_finished,
                   (True, 3): self._on_server_finished}[(self.is_client, self.step)]
        return handler(bytes(msg))

    def _on_client_hello(self, msg):
        client_random, client_pub = msg[:32], msg[32:]
        server_random = self._randbytes(32)
        self.session_id = self._randbytes(32)
        self._master = _master(self._priv, client_pub, client_random, server_random)
        body = server_random + _public(self._priv) + self.session_id
        proof = _mac(self._master, b"server hello", msg, body)
        reply = body + proof
        self._transcript = msg + reply
        self.step = 2
        return reply

    def _on_server_hello(self, msg):
        server_random, server_pub = msg[:32], msg[32:64]
        self.session_id, proof = msg[64:96], msg[96:]
        client_hello = self._transcript
        self._master = _master(self._priv, server_pub, client_hello[:32], server_random)
        if not hmac.compare_digest(proof, _mac(self._master, b"server hello",
                                               client_hello, msg[:96])):
            raise HandshakeError("server proof mismatch")
        self._transcript += msg
        reply = CIPHER_LABEL + self.session_id + _mac(
            self._master, b"client finished", self._transcript)
        self._transcript += reply
        self.step = 3
        return reply

    def _on_client_finished(self, msg):
        label, session_id, proof = msg[:16], msg[16:48], msg[48:]
        expected = _mac(self._master, b"client finished", self._transcript)
        if label != CIPHER_LABEL or session_id != self.session_id or \
                not hmac.compare_digest(proof, expected):
            raise HandshakeError("client finished mismatch")
        self._transcript += msg
        reply = READY_LABEL + _mac(self._master, b"server finished", self._transcript)
        client_keys, server_keys = _expand(self._master)
        self.send_keys, self.recv_keys = server_keys, client_keys
        self.step = 4
        return reply

    def _on_server_finished(self, msg):
        expected = _mac(self._master, b"server finished", self._transcript)
        if msg[:16] != READY_LABEL or not hmac.compare_digest(msg[16:], expected):
            raise HandshakeError("server finished mismatch")
        client_keys, server_keys = _expand(self._master)
        self.send_keys, self.recv_keys = client_keys, server_keys
        self.step = 4
        return None
