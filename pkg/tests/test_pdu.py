import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipstor.errors import Incomplete, ProtocolError
from ipstor.pdu import (BHS_SIZE, Cdb, CdbKind, FrameNote, Opcode, Pdu, PduReader, ScsiStatus,
                        command_specific, decode_cdb, decode_pdu, decode_text, describe,
                        encode_cdb, encode_pdu, encode_text, note_for, status_specific)

u32 = st.integers(0, 0xFFFFFFFF)


@st.composite
def pdus(draw):
    op = draw(st.sampled_from(list(Opcode)))
    data = draw(st.binary(max_size=300))
    fields = dict(
        final_flag=draw(st.booleans()),
        lun=draw(st.integers(0, 16383)),
        initiator_task_tag=draw(u32),
        cmd_sn=draw(u32),
        buffer_offset=draw(u32),
        opcode_specific=draw(st.binary(min_size=16, max_size=16)),
    )
    if op.is_request:
        fields["exp_stat_sn"] = draw(u32)
    else:
        fields["stat_sn"] = draw(u32)
    return Pdu.make(op, data, **fields)


cdbs = st.builds(Cdb, st.sampled_from(list(CdbKind)), u32, st.integers(1, 0xFFFF))
text_keys = st.lists(st.tuples(
    st.text(st.characters(blacklist_characters="=\0", blacklist_categories=("Cs",)), min_size=1),
    st.text(st.characters(blacklist_characters="\0", blacklist_categories=("Cs",)))))


def test_opcodes_disjoint_and_unique():
    values = [op.value for op in Opcode]
    assert len(values) == len(set(values)) == 12
    requests = {op for op in Opcode if op.is_request}
    assert requests == {Opcode.NOP_OUT, Opcode.SCSI_COMMAND, Opcode.LOGIN_REQUEST,
                        Opcode.TEXT_REQUEST, Opcode.SCSI_DATA_OUT, Opcode.LOGOUT_REQUEST}


def test_empty_nop_is_48_bytes():
    wire = encode_pdu(Pdu.make(Opcode.NOP_OUT))
    assert len(wire) == BHS_SIZE
    assert wire[5:8] == b"\0\0\0"


def test_data_in_padding():
    wire = encode_pdu(Pdu.make(Opcode.SCSI_DATA_IN, b"abcde"))
    assert len(wire) == 56
    assert wire[-3:] == b"\0\0\0"


def test_length_mismatch_rejected():
    p = Pdu.make(Opcode.NOP_OUT, b"abc").evolve(data_segment_length=2)
    with pytest.raises(ValueError):
        encode_pdu(p)


def test_decode_short_input_incomplete():
    with pytest.raises(Incomplete) as exc:
        decode_pdu(bytes(47))
    assert exc.value.needed == 48


def test_decode_truncated_payload_incomplete():
    wire = encode_pdu(Pdu.make(Opcode.NOP_OUT, b"12345"))
    with pytest.raises(Incomplete) as exc:
        decode_pdu(wire[:-1])
    assert exc.value.needed == len(wire)


def test_unknown_opcode():
    wire = bytearray(encode_pdu(Pdu.make(Opcode.NOP_OUT)))
    wire[0] = 0x7F
    with pytest.raises(ProtocolError):
        decode_pdu(bytes(wire))


def test_oversize_segment_rejected():
    wire = bytearray(encode_pdu(Pdu.make(Opcode.NOP_OUT)))
    wire[5:8] = (1 << 20 | 1).to_bytes(3, "big")
    with pytest.raises(ProtocolError):
        decode_pdu(bytes(wire))
    with pytest.raises(ProtocolError):
        decode_pdu(encode_pdu(Pdu.make(Opcode.NOP_OUT, bytes(100))), max_data_length=64)


def test_nonzero_ahs_rejected():
    wire = bytearray(encode_pdu(Pdu.make(Opcode.NOP_OUT)))
    wire[4] = 1
    with pytest.raises(ProtocolError):
        decode_pdu(bytes(wire))


def test_write_command_round_trip():
    p = Pdu.make(Opcode.SCSI_COMMAND, initiator_task_tag=9, cmd_sn=4,
                 opcode_specific=command_specific(Cdb(CdbKind.WRITE_10, 7, 2)))
    wire = encode_pdu(p)
    assert decode_pdu(wire) == (p, len(wire))


@settings(max_examples=300, deadline=None)
@given(pdus())
def test_pdu_round_trip(p):
    wire = encode_pdu(p)
    assert len(wire) % 4 == 0
    assert decode_pdu(wire) == (p, len(wire))


@settings(max_examples=100, deadline=None)
@given(st.lists(pdus(), max_size=8), st.binary(max_size=47), st.integers(1, 97))
def test_stream_framing(items, trailing, chunk):
    stream = b"".join(encode_pdu(p) for p in items)
    consumed, out = 0, []
    data = stream + trailing
    while True:
        try:
            p, n = decode_pdu(data[consumed:])
        except Incomplete:
            break
        out.append(p)
        consumed += n
    assert out == items and consumed == len(stream)
    reader, got = PduReader(), []
    for i in range(0, len(stream), chunk):
        got += reader.feed(stream[i:i + chunk])
    assert got == items and reader.pending == 0


def test_cdb_fixtures():
    assert encode_cdb(Cdb(CdbKind.WRITE_10, 0, 1)) == bytes([0x2A, 0, 0, 0, 0, 0, 0, 0, 1, 0])
    raw = encode_cdb(Cdb(CdbKind.READ_10, 0x100, 8))
    assert raw[0] == 0x28 and raw[4] == 0x01 and raw[8] == 0x08
    assert len(raw) == 10


def test_cdb_errors():
    with pytest.raises(ProtocolError):
        decode_cdb(bytes([0x12]) + bytes(9))
    with pytest.raises(ProtocolError):
        decode_cdb(bytes(9))
    with pytest.raises(ValueError):
        encode_cdb(Cdb(CdbKind.READ_10, 0, 0))


@given(cdbs)
def test_cdb_round_trip(c):
    assert decode_cdb(encode_cdb(c)) == c


def test_text_fixtures():
    assert encode_text([("SendTargets", "All")]) == b"SendTargets=All\0"
    assert encode_text([]) == b""
    assert decode_text(b"") == []
    with pytest.raises(ProtocolError):
        decode_text(b"SendTargets=All")
    with pytest.raises(ProtocolError):
        decode_text(b"SendTargets\0")
    with pytest.raises(ValueError):
        encode_text([("a=b", "c")])


@given(text_keys)
def test_text_round_trip(pairs):
    assert decode_text(encode_text(pairs)) == pairs


def test_describe_and_notes():
    cmd = Pdu.make(Opcode.SCSI_COMMAND, initiator_task_tag=3,
                   opcode_specific=command_specific(Cdb(CdbKind.WRITE_10, 0x10, 128)))
    assert describe(cmd) == "SCSI: Write(10) LUN: 0x00 (LBA: 0x00000010, Len: 128)"
    data_in = Pdu.make(Opcode.SCSI_DATA_IN, b"x" * 10, initiator_task_tag=3)
    assert describe(data_in) == "SCSI: Data In LUN: 0x00"
    assert note_for(data_in) == FrameNote("SCSI: Data In LUN: 0x00", 3, (48, 58))
    assert note_for(cmd).data_range == (0, 0)
    ok = Pdu.make(Opcode.SCSI_RESPONSE, opcode_specific=status_specific(ScsiStatus.GOOD))
    assert describe(ok) == "SCSI: Response LUN: 0x00 (Good)"
    assert describe(Pdu.make(Opcode.NOP_IN)) == "NOP In"
