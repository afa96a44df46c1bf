import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipstor.channel import (RECORD_HANDSHAKE_WIRE_BYTES, CryptoCostModel, LinkParams,
                            MemNetwork, RecordKeys, SecurityMode, TcpNetwork, derive_sas,
                            esp_max_payload, load_psk, open_packet, open_record, packetize,
                            seal_packet, seal_record, wire_bytes)
from ipstor.channel.esp import DEFAULT_PSK, inner_segment
from ipstor.channel.model import esp_wire_len
from ipstor.channel.record import RecordReader, record_length
from ipstor.errors import HandshakeError, Incomplete, IntegrityError, ReplayError

PLAIN, RECORD, PACKET = SecurityMode.PLAIN, SecurityMode.RECORD_LAYER, SecurityMode.PACKET_LAYER
PORTAL = ("192.168.2.1", 3260)
CLIENT, SERVER = ("192.168.2.2", 50387), PORTAL


def mem_pair(mode, link=None, costs=None, **kw):
    """Connected client endpoint plus the list of (time_ns, bytes) the server got."""
    net = MemNetwork(mode, link or LinkParams(), costs, **kw)
    got, servers = [], []

    def accept(ep):
        servers.append(ep)
        ep.serve(lambda data: got.append((net.now_ns(), data)))

    net.listen(PORTAL, accept)
    client = net.connect(PORTAL)
    return net, client, servers[0], got


# --- packetization and wire sizes --------------------------------------------------

def test_packetize_examples():
    assert packetize(b"", 1500) == []
    one = packetize(bytes(1460), 1500)
    assert len(one) == 1 and one[0].wire_len == 1500
    two = packetize(bytes(1461), 1500)
    assert len(two) == 2 and sum(p.wire_len for p in two) == 1541
    with pytest.raises(ValueError):
        packetize(b"x", 575)


@given(st.binary(max_size=5000), st.integers(576, 9000))
def test_packetize_properties(data, mtu):
    pkts = packetize(data, mtu)
    assert b"".join(p.payload for p in pkts) == data
    assert all(p.payload and p.wire_len == len(p.payload) + 40 <= mtu for p in pkts)
    assert [p.seq for p in pkts] == list(range(len(pkts)))


def test_wire_bytes_fixtures():
    assert [wire_bytes(m, 0) for m in SecurityMode] == [0, 0, 0]
    assert [wire_bytes(m, 16384, 1500) for m in SecurityMode] == [16864, 16885, 17376]
    assert [wire_bytes(m, 100, 1500) for m in SecurityMode] == [140, 161, 188]
    assert esp_max_payload(1500) == 1418
    assert esp_wire_len(1418) == 1500


def test_wire_bytes_ordering_exhaustive():
    for s in range(1, 100_001):
        assert wire_bytes(PLAIN, s) < wire_bytes(RECORD, s) < wire_bytes(PACKET, s), s


def test_link_and_cost_validation():
    with pytest.raises(ValueError):
        LinkParams(-1)
    with pytest.raises(ValueError):
        LinkParams(mtu=500)
    with pytest.raises(ValueError):
        LinkParams(bandwidth=0)
    with pytest.raises(ValueError):
        CryptoCostModel(-1e-6)
    assert SecurityMode.parse("ssl") is RECORD
    with pytest.raises(ValueError):
        SecurityMode.parse("tls")


# --- record layer -----------------------------------------------------------------

def keys():
    return RecordKeys(bytes(range(16)), b"\1\2\3\4")


def test_record_sizes():
    assert len(seal_record(bytes(100), keys())) == 121
    assert len(seal_record(bytes(16384), keys())) == 16405
    with pytest.raises(ValueError):
        seal_record(bytes(16385), keys())


def test_record_round_trip_and_truncation():
    k_send, k_recv = keys(), keys()
    rec = seal_record(b"hello", k_send)
    with pytest.raises(Incomplete):
        record_length(rec[:-1])
    assert open_record(rec, k_recv) == b"hello"


def test_record_every_bit_flip_detected():
    rec = seal_record(bytes(range(40)), keys())
    for bit in range(len(rec) * 8):
        bad = bytearray(rec)
        bad[bit // 8] ^= 1 << (bit % 8)
        reader = RecordReader(keys())
        try:
            out = reader.feed(bytes(bad))
        except IntegrityError:
            continue
        # a longer claimed length just waits for bytes that never validate
        assert out == [] and reader.pending == len(rec)
        with pytest.raises(IntegrityError):
            reader.feed(bytes(16400))


def test_record_replayed_record_rejected():
    send, recv = keys(), keys()
    first = seal_record(b"a", send)
    assert open_record(first, recv) == b"a"
    with pytest.raises(IntegrityError):
        open_record(first, recv)


# --- ESP --------------------------------------------------------------------------

def sas(psk=DEFAULT_PSK):
    return derive_sas(psk, CLIENT, SERVER)


def test_esp_sizes():
    c2s, _ = sas()
    assert len(seal_packet(inner_segment(bytes(100), c2s), c2s)) == 188
    assert len(seal_packet(inner_segment(bytes(1418), c2s), c2s)) == 1500


def test_esp_round_trip_replay_and_tamper():
    tx, _ = sas()
    rx, _ = sas()
    inner = inner_segment(b"payload", tx)
    pkt = seal_packet(inner, tx)
    assert open_packet(pkt, rx) == inner
    with pytest.raises(ReplayError):
        open_packet(pkt, rx)
    pkt2 = seal_packet(inner_segment(b"more", tx), tx)
    for bit in range(len(pkt2) * 8):
        bad = bytearray(pkt2)
        bad[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(IntegrityError):
            open_packet(bytes(bad), rx)
    assert open_packet(pkt2, rx)[20:] == b"more"


def test_esp_wrong_psk():
    tx, _ = sas(bytes(32))
    rx, _ = sas()
    with pytest.raises(IntegrityError):
        open_packet(seal_packet(inner_segment(b"x", tx), tx), rx)


def test_load_psk():
    assert load_psk(environ={}) == DEFAULT_PSK
    assert load_psk("11" * 32) == b"\x11" * 32
    assert load_psk(environ={"IPSTOR_PSK": "ab" * 32}) == b"\xab" * 32
    with pytest.raises(ValueError):
        load_psk("zz")
    with pytest.raises(ValueError):
        load_psk("ab" * 16)


# --- simulated link -------------------------------------------------------------

def test_plain_has_no_handshake_frames():
    net, client, _, _ = mem_pair(PLAIN)
    assert len(net.trace) == 0


def test_record_handshake_takes_two_round_trips():
    link = LinkParams(0.001, None)
    net, client, server, got = mem_pair(RECORD, link, CryptoCostModel())
    assert client.layer.established and net.now_ns() == 4_000_000
    recs = net.trace.records()
    assert [r.wire_len for r in recs] == [104, 168, 120, 88]
    assert sum(r.wire_len for r in recs) == RECORD_HANDSHAKE_WIRE_BYTES == 480
    assert all(r.payload_len == 0 for r in recs)


def test_record_handshake_failure_is_handshake_error():
    def corrupt(pkt):
        if pkt.seq == 0 and pkt.src[1] == 3260:  # server hello
            return dataclasses.replace(pkt, payload=bytes(len(pkt.payload)))
    with pytest.raises(HandshakeError):
        mem_pair(RECORD, tamper=corrupt)


def test_echo_round_trip_is_two_delays():
    link = LinkParams(0.0005, None)
    net = MemNetwork(PLAIN, link)
    net.listen(PORTAL, lambda ep: ep.serve(ep.send))
    client = net.connect(PORTAL)
    client.send(bytes(48))
    assert client.recv() == bytes(48)
    assert net.now_ns() == 1_000_000


def test_serialization_delay():
    net, client, _, got = mem_pair(PLAIN, LinkParams(0, 8e6), CryptoCostModel())
    client.send(bytes(1460))
    net.sim.run()
    assert got == [(1_500_000, bytes(1460))]


def test_packet_layer_costs_seal_plus_open():
    net, client, _, got = mem_pair(PACKET, LinkParams(0, None), CryptoCostModel(50e-6, 0))
    client.send(bytes(100))
    net.sim.run()
    assert got == [(100_000, bytes(100))]


def test_plain_costs_are_forced_to_zero():
    net = MemNetwork(PLAIN, costs=CryptoCostModel(1, 1))
    assert net.costs == CryptoCostModel()


def test_mismatched_psk_fails_first_packet():
    net = MemNetwork(PACKET, psk=bytes(32))
    servers = []
    net.listen(PORTAL, lambda ep: (servers.append(ep), ep.serve(lambda d: None)), psk=DEFAULT_PSK)
    client = net.connect(PORTAL)
    client.send(b"hello")
    net.sim.run()
    assert isinstance(servers[0].error, IntegrityError)
    assert servers[0].delivered == 0


@pytest.mark.parametrize("mode", list(SecurityMode))
@settings(max_examples=15, deadline=None)
@given(chunks=st.lists(st.binary(min_size=1, max_size=40000), max_size=5))
def test_transparency(mode, chunks):
    net, client, _, got = mem_pair(mode)
    for c in chunks:
        client.send(c)
    net.sim.run()
    assert b"".join(d for _, d in got) == b"".join(chunks)


def test_timeline_is_reproducible():
    def run():
        net, client, _, got = mem_pair(RECORD, seed=7)
        for n in (10, 20000, 5):
            client.send(bytes(n))
        net.sim.run()
        return got, net.trace.records()
    assert run() == run()


def test_traced_wire_bytes_match_formula():
    for mode in SecurityMode:
        for size in (1, 1460, 16384, 70000):
            net, client, _, _ = mem_pair(mode)
            before = sum(r.wire_len for r in net.trace.records())
            client.send(bytes(size))
            net.sim.run()
            total = sum(r.wire_len for r in net.trace.records()) - before
            assert total == wire_bytes(mode, size), (mode, size)


def test_fin_waits_for_data_being_opened():
    net = MemNetwork(PACKET, LinkParams(0.001, None), CryptoCostModel(1e-3, 0))
    net.listen(PORTAL, lambda ep: (ep.send(b"bye"), ep.close()))
    client = net.connect(PORTAL)
    assert client.recv() == b"bye"
    assert client.recv() == b""


# --- real sockets -----------------------------------------------------------------


@pytest.mark.parametrize("mode", list(SecurityMode))
def test_tcp_echo(mode):
    net = TcpNetwork(mode, timeout=10)
    listener = net.listen(("127.0.0.1", 0), lambda ep: ep.serve(ep.send))
    try:
        client = net.connect(listener.address)
        payload = bytes(range(256)) * 300
        client.send(payload)
        got = b""
        while len(got) < len(payload):
            got += client.recv()
        assert got == payload
        client.close()
    finally:
        listener.close()
    labels = {r.protocol for r in net.trace.records()}
    assert labels == {mode.protocol}


def test_tcp_listen_conflict_is_startup_error():
    from ipstor.errors import StartupError
    net = TcpNetwork()
    listener = net.listen(("127.0.0.1", 0), lambda ep: None)
    try:
        with pytest.raises(StartupError):
            TcpNetwork().listen(listener.address, lambda ep: None)
    finally:
        listener.close()
