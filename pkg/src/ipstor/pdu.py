"""iSCSI PDU and SCSI CDB codec.

Basic header segment layout used on the wire (48 bytes, big-endian)::

     0      opcode
     1      flags (0x80 = final)
     2..3   reserved, zero
     4      TotalAHSLength, always zero
     5..7   DataSegmentLength
     8..15  LUN (peripheral or flat addressing)
    16..19  initiator task tag
    20..23  buffer offset (Data-In / Data-Out)
    24..27  requests: CmdSN       responses: StatSN
    28..31  requests: ExpStatSN   responses: ExpCmdSN (``cmd_sn``)
    32..47  opcode specific (CDB, SCSI status, login stage/status)

The data segment follows, zero-padded to a multiple of 4 bytes.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace

from .errors import Incomplete, ProtocolError

BHS_SIZE = 48
BLOCK_SIZE = 512
DEFAULT_MAX_DATA_SEGMENT = 65536
MAX_DATA_LENGTH = 1 << 20
RESERVED_TAG = 0xFFFFFFFF

FLAG_FINAL = 0x80

_BHS = struct.Struct("!BB2xB3s8sIIII16s")


class Opcode(enum.IntEnum):
    NOP_OUT = 0x00
    SCSI_COMMAND = 0x01
    LOGIN_REQUEST = 0x03
    TEXT_REQUEST = 0x04
    SCSI_DATA_OUT = 0x05
    LOGOUT_REQUEST = 0x06
    NOP_IN = 0x20
    SCSI_RESPONSE = 0x21
    LOGIN_RESPONSE = 0x23
    TEXT_RESPONSE = 0x24
    SCSI_DATA_IN = 0x25
    LOGOUT_RESPONSE = 0x26

    @property
    def is_request(self):
        return self.value < 0x20


_OPCODES = {op.value: op for op in Opcode}


class ScsiStatus(enum.IntEnum):
    GOOD = 0x00
    CHECK_CONDITION = 0x02


@dataclass(frozen=True)
class Bhs:
    opcode: Opcode
    final_flag: bool = True
    data_segment_length: int = 0
    lun: int = 0
    initiator_task_tag: int = 0
    cmd_sn: int = 0
    stat_sn: int = 0
    exp_stat_sn: int = 0
    buffer_offset: int = 0
    opcode_specific: bytes = bytes(16)


@dataclass(frozen=True)
class Pdu:
    bhs: Bhs
    data: bytes = b""

    @classmethod
    def make(cls, opcode, data=b"", **fields):
        """Build a PDU with ``data_segment_length`` filled in from ``data``."""
        data = bytes(data)
        return cls(Bhs(opcode, data_segment_length=len(data), **fields), data)

    @property
    def opcode(self):
        return self.bhs.opcode

    @property
    def itt(self):
        return self.bhs.initiator_task_tag

    def evolve(self, **fields):
        return replace(self, bhs=replace(self.bhs, **fields))


def padded_length(n):
    return (n + 3) & ~3


def wire_length(pdu):
    return BHS_SIZE + padded_length(len(pdu.data))


def _encode_lun(lun):
    if 0 <= lun < 256:
        return lun.to_bytes(2, "big") + bytes(6)
    if lun < 16384:
        return (0x4000 | lun).to_bytes(2, "big") + bytes(6)
    raise ValueError(f"LUN {lun} out of range")


def _decode_lun(raw):
    if any(raw[2:]):
        raise ProtocolError("unsupported LUN format")
    word = int.from_bytes(raw[:2], "big")
    method = word >> 14
    if method == 0 and word < 256:
        return word
    if method == 1:
        return word & 0x3FFF
    raise ProtocolError("unsupported LUN addressing method")


def encode_pdu(p: Pdu) -> bytes:
    h = p.bhs
    if h.data_segment_length != len(p.data):
        raise ValueError(
            f"data_segment_length {h.data_segment_length} != payload {len(p.data)}")
    if not 0 <= h.data_segment_length < 1 << 24:
        raise ValueError("data segment too long")
    if len(h.opcode_specific) != 16:
        raise ValueError("opcode_specific must be 16 bytes")
    if h.opcode.is_request:
        if h.stat_sn:
            raise ValueError("requests carry exp_stat_sn, not stat_sn")
        sn_a, sn_b = h.cmd_sn, h.exp_stat_sn
    else:
        if h.exp_stat_sn:
            raise ValueError("responses carry stat_sn, not exp_stat_sn")
        sn_a, sn_b = h.stat_sn, h.cmd_sn
    header = _BHS.pack(
        h.opcode, FLAG_FINAL if h.final_flag else 0, 0,
        h.data_segment_length.to_bytes(3, "big"), _encode_lun(h.lun),
        h.initiator_task_tag, h.buffer_offset, sn_a, sn_b, h.opcode_specific)
    pad = padded_length(len(p.data)) - len(p.data)
    return header + p.data + bytes(pad)


def decode_pdu(data, max_data_length=MAX_DATA_LENGTH):
    """Decode one PDU from the front of ``data``.

    Returns ``(pdu, consumed)``. Raises :class:`Incomplete` when more bytes
    are needed, so callers can use it for stream framing.
    """
    if len(data) < BHS_SIZE:
        raise Incomplete(BHS_SIZE)
    (op, flags, ahs, dsl, lun, itt, offset, sn_a, sn_b,
     specific) = _BHS.unpack_from(data, 0)
    opcode = _OPCODES.get(op)
    if opcode is None:
        raise ProtocolError(f"unknown opcode 0x{op:02x}")
    if flags & ~FLAG_FINAL:
        raise ProtocolError(f"unsupported flags 0x{flags:02x}")
    if bytes(data[2:4]) != b"\0\0":
        raise ProtocolError("reserved header bytes set")
    if ahs:
        raise ProtocolError("additional header segments are not supported")
    length = int.from_bytes(dsl, "big")
    if length > max_data_length:
        raise ProtocolError(f"data segment of {length} bytes exceeds {max_data_length}")
    total = BHS_SIZE + padded_length(length)
    if len(data) < total:
        raise Incomplete(total)
    if opcode.is_request:
        cmd_sn, exp_stat_sn, stat_sn = sn_a, sn_b, 0
    else:
        stat_sn, cmd_sn, exp_stat_sn = sn_a, sn_b, 0
    bhs = Bhs(opcode, bool(flags & FLAG_FINAL), length, _decode_lun(lun), itt,
              cmd_sn, stat_sn, exp_stat_sn, offset, bytes(specific))
    return Pdu(bhs, bytes(data[BHS_SIZE:BHS_SIZE + length])), total


class PduReader:
    """Incremental stream framer: feed bytes, get whole PDUs back."""

    def __init__(self, max_data_length=MAX_DATA_LENGTH):
        self.max_data_length = max_data_length
        self._buf = bytearray()

    def feed(self, chunk):
        self._buf += chunk
        out = []
        pos = 0
        with memoryview(self._buf) as view:
            while True:
                try:
                    pdu, used = decode_pdu(view[pos:], self.max_data_length)
                except Incomplete:
                    break
                out.append(pdu)
                pos += used
        del self._buf[:pos]
        return out

    @property
    def pending(self):
        return len(self._buf)


# --- SCSI CDBs -------------------------------------------------------------

class CdbKind(enum.IntEnum):
    READ_10 = 0x28
    WRITE_10 = 0x2A


_CDB = struct.Struct("!BxIxHx")


@dataclass(frozen=True)
class Cdb:
    kind: CdbKind
    lba: int
    blocks: int

    @property
    def transfer_length(self):
        return self.blocks * BLOCK_SIZE


def encode_cdb(c: Cdb) -> bytes:
    if not 1 <= c.blocks <= 0xFFFF:
        raise ValueError("blocks must be in 1..65535")
    if not 0 <= c.lba <= 0xFFFFFFFF:
        raise ValueError("lba out of 32-bit range")
    return _CDB.pack(c.kind, c.lba, c.blocks)


def decode_cdb(raw) -> Cdb:
    if len(raw) != 10:
        raise ProtocolError(f"CDB must be 10 bytes, got {len(raw)}")
    op, lba, blocks = _CDB.unpack(bytes(raw))
    try:
        kind = CdbKind(op)
    except ValueError:
        raise ProtocolError(f"unsupported SCSI opcode 0x{op:02x}") from None
    if blocks == 0:
        raise ProtocolError("zero-length transfer")
    return Cdb(kind, lba, blocks)


# --- text keys ---------------------------------------------------------------

def encode_text(pairs) -> bytes:
    out = bytearray()
    for key, value in pairs:
        if not key or "=" in key or "\0" in key or "\0" in value:
            raise ValueError(f"invalid text key {key!r}")
        out += f"{key}={value}".encode() + b"\0"
    return bytes(out)


def decode_text(raw) -> list[tuple[str, str]]:
    raw = bytes(raw)
    if not raw:
        return []
    if not raw.endswith(b"\0"):
        raise ProtocolError("text data not NUL-terminated")
    pairs = []
    for item in raw[:-1].split(b"\0"):
        key, sep, value = item.partition(b"=")
        if not sep or not key:
            raise ProtocolError(f"malformed text key {item!r}")
        try:
            pairs.append((key.decode(), value.decode()))
        except UnicodeDecodeError:
            raise ProtocolError("text key is not valid UTF-8") from None
    return pairs


# --- opcode-specific helpers ---------------------------------------------------

def cdb_of(pdu):
    return decode_cdb(pdu.bhs.opcode_specific[:10])


def command_specific(cdb):
    return encode_cdb(cdb).ljust(16, b"\0")


def status_specific(status):
    return bytes([status]).ljust(16, b"\0")


def scsi_status(pdu):
    return pdu.bhs.opcode_specific[0]


# login stages: 0 security negotiation, 1 operational, 3 full feature
STAGE_SECURITY = 0
STAGE_OPERATIONAL = 1
STAGE_FULL_FEATURE = 3

LOGIN_SUCCESS = (0, 0)
LOGIN_INITIATOR_ERROR = (2, 0)
LOGIN_AUTH_FAILED = (2, 1)
LOGIN_NOT_FOUND = (2, 3)
LOGIN_MISSING_FIELDS = (2, 7)


def login_specific(csg, nsg, transit, status=LOGIN_SUCCESS):
    return bytes([(csg << 2) | nsg, 0x80 if transit else 0,
                  status[0], status[1]]).ljust(16, b"\0")


def login_fields(pdu):
    """Return ``(csg, nsg, transit, (status_class, status_detail))``."""
    s = pdu.bhs.opcode_specific
    return s[0] >> 2, s[0] & 3, bool(s[1] & 0x80), (s[2], s[3])


# --- Wireshark-style one-line summaries -----------------------------------------

_SCSI_NAMES = {CdbKind.READ_10: "Read(10)", CdbKind.WRITE_10: "Write(10)"}


def describe(pdu) -> str:
    op = pdu.opcode
    lun = f"LUN: 0x{pdu.bhs.lun:02x}"
    if op is Opcode.SCSI_COMMAND:
        try:
            cdb = cdb_of(pdu)
        except ProtocolError:
            return f"SCSI: Command {lun}"
        return (f"SCSI: {_SCSI_NAMES[cdb.kind]} {lun} "
                f"(LBA: 0x{cdb.lba:08x}, Len: {cdb.blocks})")
    if op is Opcode.SCSI_DATA_IN:
        return f"SCSI: Data In {lun}"
    if op is Opcode.SCSI_DATA_OUT:
        return f"SCSI: Data Out {lun}"
    if op is Opcode.SCSI_RESPONSE:
        status = scsi_status(pdu)
        text = "Good" if status == ScsiStatus.GOOD else "Check Condition"
        return f"SCSI: Response {lun} ({text})"
    return {
        Opcode.NOP_OUT: "NOP Out",
        Opcode.NOP_IN: "NOP In",
        Opcode.LOGIN_REQUEST: "Login Command",
        Opcode.LOGIN_RESPONSE: "Login Response",
        Opcode.TEXT_REQUEST: "Text Command",
        Opcode.TEXT_RESPONSE: "Text Response",
        Opcode.LOGOUT_REQUEST: "Logout Command",
        Opcode.LOGOUT_RESPONSE: "Logout Response",
    }[op]


@dataclass(frozen=True)
class FrameNote:
    """What the tracer should say about the bytes of one send.

    ``data_range`` marks the SCSI data bytes inside the send (used for
    goodput accounting); ``None`` means the whole send counts.
    """
    summary: str
    task_tag: int | None = None
    data_range: tuple[int, int] | None = field(default=None)


def note_for(pdu):
    if pdu.opcode in (Opcode.SCSI_DATA_IN, Opcode.SCSI_DATA_OUT):
        rng = (BHS_SIZE, BHS_SIZE + len(pdu.data))
    else:
        rng = (0, 0)
    return FrameNote(describe(pdu), pdu.itt, rng)
