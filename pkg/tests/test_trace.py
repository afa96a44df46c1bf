import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipstor.bench import ExperimentConfig, run_mode
from ipstor.channel import CryptoCostModel, LinkParams, SecurityMode
from ipstor.errors import AnalysisError
from ipstor.trace import (COMPARISON_CSV_HEADER, CSV_HEADER, ComparisonTable, Direction,
                          FrameEvent, ModeGroup, RunReport, RttSample, ThroughputBucket, Trace,
                          compare_runs, export_csv, export_text, format_hierarchy, import_csv,
                          protocol_hierarchy, record_frame, render_comparison_csv,
                          render_comparison_text, rtt_series, throughput_series)

INI, TGT = ("192.168.2.2", 50387), ("192.168.2.1", 3260)
I2T, T2I = Direction.I2T, Direction.T2I


def ev(t, info, direction=I2T, tag=None, payload=0, wire=88, proto="iSCSI"):
    src, dst = (INI, TGT) if direction is I2T else (TGT, INI)
    return FrameEvent(t, src, dst, proto, info, wire, payload, direction, tag)


def trace_of(*events):
    tr = Trace()
    for e in events:
        record_frame(tr, e)
    return tr


def test_empty_trace():
    tr = Trace()
    assert export_csv(tr) == ",".join(CSV_HEADER) + "\n"
    assert export_text(tr) == ""
    assert rtt_series(tr) == ([], 0)
    assert throughput_series(tr, 1.0) == ([], None)
    assert protocol_hierarchy(tr) == []


def test_fixture_line_matches_capture_row():
    events = [ev(i, "filler", T2I) for i in range(157)]
    events.append(FrameEvent(23_558_580_000, INI, TGT, "TCP", None, 40, 0, I2T))
    line = export_text(trace_of(*events)).splitlines()[-1]
    assert line == "158 23.558580 192.168.2.2 192.168.2.1 TCP 50387 > iscsi-target [ACK]"


def test_records_are_time_merged_and_dense():
    tr = trace_of(ev(30, "c"), ev(10, "a"), ev(20, "b"), ev(10, "a2"))
    recs = tr.records()
    assert [r.info for r in recs] == ["a", "a2", "b", "c"]
    assert [r.frame_no for r in recs] == [1, 2, 3, 4]


def test_concurrent_producers():
    tr = Trace()

    def produce(k):
        for i in range(500):
            tr.record(ev(i * 7 + k, f"{k}"))

    threads = [threading.Thread(target=produce, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    recs = tr.records()
    assert len(recs) == 2000
    assert [r.frame_no for r in recs] == list(range(1, 2001))
    assert all(a.time_ns <= b.time_ns for a, b in zip(recs, recs[1:]))


def event_strategy(max_ns):
    return st.builds(
        ev, st.integers(0, max_ns),
        st.text(st.characters(blacklist_categories=("Cc", "Cs")), min_size=1, max_size=30),
        st.sampled_from([I2T, T2I]), st.one_of(st.none(), st.integers(0, 2**32 - 1)),
        st.integers(0, 1460), st.integers(1460, 1500), st.sampled_from(["TCP", "ESP", "iSCSI"]))


events = event_strategy(10**12)
# at most 10^4 buckets: 1 s of events at widths >= 100 us
short_events = event_strategy(10**9)


@settings(max_examples=50)
@given(st.lists(events, max_size=30))
def test_csv_round_trip(evs):
    tr = trace_of(*evs)
    assert import_csv(export_csv(tr)) == tr.records()


def test_import_rejects_bad_header():
    with pytest.raises(AnalysisError):
        import_csv("a,b\n")


# --- RTT ----------------------------------------------------------------------------

def test_single_ping_rtt():
    tr = trace_of(ev(1_000_000_000, "NOP Out", I2T, 5),
                  ev(1_002_000_000, "NOP In", T2I, 5))
    assert rtt_series(tr) == ([RttSample(0, 5, 0.002)], 0)


def test_rtt_starts_at_first_segment():
    tr = trace_of(
        ev(0, "[TCP segment of a reassembled PDU]", I2T, 3, proto="TCP"),
        ev(5, "SCSI: Write(10) LUN: 0x00 (LBA: 0x00000000, Len: 4)", I2T, 3),
        ev(9, "SCSI: Data Out LUN: 0x00", I2T, 3, payload=2048),
        ev(100, "SCSI: Response LUN: 0x00 (Good)", T2I, 3))
    (sample,), orphans = rtt_series(tr)
    assert sample.rtt == 100 / 1e9 and orphans == 0


def test_orphans_and_duplicates():
    tr = trace_of(ev(0, "NOP Out", I2T, 1), ev(5, "NOP Out", I2T, 2), ev(9, "NOP In", T2I, 2))
    samples, orphans = rtt_series(tr)
    assert [s.task_tag for s in samples] == [2] and orphans == 1
    with pytest.raises(AnalysisError):
        rtt_series(trace_of(ev(0, "NOP Out", I2T, 1), ev(5, "NOP Out", I2T, 1)))


def test_rtt_recomputable_from_csv():
    run = run_mode(ExperimentConfig(mode="ssl", size_bytes=256 * 1024, pings=5), SecurityMode.RECORD_LAYER)
    recs = import_csv(export_csv(run.trace))
    assert rtt_series(recs) == rtt_series(run.trace)
    times = {r.time_ns for r in recs}
    for s in run.report.rtt:
        assert any(round(s.rtt * 1e9) + t in times for t in times)


def test_ten_pings_exactly_two_delays(stack):
    st_ = stack(link=LinkParams(0.001, None), costs=CryptoCostModel())
    s = st_.login()
    for _ in range(10):
        s.nop_ping()
    samples, orphans = rtt_series(st_.trace)
    assert len(samples) == 10 and orphans == 0
    assert all(x.rtt == 0.002 for x in samples)


# --- throughput -------------------------------------------------------------------

def test_single_frame_bucket():
    tr = trace_of(ev(100_000_000, "SCSI: Data In LUN: 0x00", T2I, 1, payload=1460, wire=1500))
    (bucket,), mean = throughput_series(tr, 1.0)
    assert (bucket.t_start, bucket.bits, bucket.width) == (0.0, 11680, 1.0)
    assert bucket.wire_bits == 12000 and mean is None


def test_invalid_width():
    with pytest.raises(ValueError):
        throughput_series(Trace(), 0)


@settings(max_examples=50)
@given(st.lists(short_events, max_size=40), st.floats(1e-4, 5.0))
def test_bucket_conservation(evs, width):
    tr = trace_of(*evs)
    buckets, _ = throughput_series(tr, width)
    assert sum(b.bits for b in buckets) == 8 * sum(r.payload_len for r in tr.records())
    starts = [b.t_start for b in buckets]
    assert all(b.bits >= 0 for b in buckets)
    assert all(abs((y - x) - buckets[0].width) < 1e-9 for x, y in zip(starts, starts[1:]))


def test_pure_functions():
    run = run_mode(ExperimentConfig(mode="plain", size_bytes=128 * 1024, pings=3), SecurityMode.PLAIN)
    assert rtt_series(run.trace) == rtt_series(run.trace)
    assert throughput_series(run.trace, 0.01) == throughput_series(run.trace, 0.01)


def test_record_layer_not_faster_than_plain():
    cfg = dict(size_bytes=512 * 1024, pings=0)
    plain = run_mode(ExperimentConfig(mode="plain", **cfg), SecurityMode.PLAIN)
    rec = run_mode(ExperimentConfig(mode="ssl", **cfg), SecurityMode.RECORD_LAYER)
    assert plain.report.payload_bytes == rec.report.payload_bytes == 2 * 512 * 1024
    end = [max(r.time_ns for r in x.trace.records() if r.payload_len) for x in (plain, rec)]
    assert end[1] >= end[0]


# --- hierarchy and wire totals ----------------------------------------------------------

def test_hierarchy_labels():
    cfg = dict(size_bytes=64 * 1024, pings=2)
    plain = run_mode(ExperimentConfig(mode="plain", **cfg), SecurityMode.PLAIN)
    assert {h[0] for h in plain.report.hierarchy} == {"TCP", "iSCSI"}
    packet = run_mode(ExperimentConfig(mode="ipsec", **cfg), SecurityMode.PACKET_LAYER)
    (label, frames, nbytes), = packet.report.hierarchy
    assert label == "ESP" and frames == len(packet.trace.records())
    assert nbytes == packet.report.wire_bytes
    text = format_hierarchy(packet.report.hierarchy)
    assert text.splitlines()[1].startswith("ESP")


def test_wire_totals_ordered_at_one_mib():
    totals = []
    for mode in SecurityMode:
        run = run_mode(ExperimentConfig(mode=mode.value, size_bytes=1 << 20, pings=0), mode)
        totals.append(run.report.wire_bytes)
    assert totals[0] < totals[1] < totals[2]


# --- comparison -------------------------------------------------------------------

def test_table_shape_fixture():
    table = ComparisonTable([
        ModeGroup("SSLv2", [(1000, 0.01), (3000, 0.005), (5000, 0.07), (10000, 0.02)],
                  [(25, 1000), (70, 5000), (90, 12000), (190, 20000)]),
        ModeGroup("IPsec", [(1000, 0.01), (3000, 0.03), (5000, 0.057), (10000, 0.12)],
                  [(20, 1000), (70, 50000), (90, 100000), (190, 300000)]),
    ])
    lines = render_comparison_text(table).splitlines()
    assert lines[0].split()[:4] == ["Mode", "Round", "trip", "time"]
    assert lines[1].split() == ["SSLv2", "(1000,", "0.01)", "(25,", "1000)"]
    assert lines[4].split() == ["(10000,", "0.02)", "(190,", "20000)"]
    assert lines[5].split() == ["IPsec", "(1000,", "0.01)", "(20,", "1000)"]
    assert lines[8].split() == ["(10000,", "0.12)", "(190,", "300000)"]
    rows = render_comparison_csv(table).splitlines()
    assert rows[0] == ",".join(COMPARISON_CSV_HEADER)
    assert rows[1] == "SSLv2,1,1000,0.01,25,1000,,,"
    assert rows[5].startswith("SSLv2,summary")
    assert len(rows) == 1 + 2 * 5


def report(mode="Plain", rtt=0.002, goodput=1e6, **config):
    cfg = {"size_bytes": 1024, "block_size": 512, "seed": 1, "pings": 2, "transport": "mem",
           "delay_s": 0.001, "bandwidth_bps": 1e9, "mtu": 1500}
    cfg.update(config)
    return RunReport(mode, cfg, [RttSample(0, 1, rtt)], [ThroughputBucket(0.0, 8192, 0.1)],
                     mean_rtt=rtt, mean_goodput=goodput, data_sha256="ab", integrity_ok=True)


def test_identical_runs_tie():
    table = compare_runs([("Plain", report()), ("Plain", report())])
    assert table.verdict == "verdict: tie"
    assert table.groups[0].rtt_pairs == table.groups[1].rtt_pairs


def test_verdict_names_winners():
    table = compare_runs([("Plain", report()), ("PacketLayer", report("PacketLayer", 0.003, 5e5))])
    assert table.verdict == "verdict: lowest mean RTT: Plain; highest mean goodput: Plain"


def test_mismatched_workloads():
    with pytest.raises(AnalysisError):
        compare_runs([("a", report()), ("b", report(seed=2))])
    other = report()
    other.data_sha256 = "cd"
    with pytest.raises(AnalysisError):
        compare_runs([("a", report()), ("b", other)])
    with pytest.raises(AnalysisError):
        compare_runs([("a", report())])


def test_report_dict_round_trip():
    r = report()
    assert RunReport.from_dict(r.to_dict()) == r
