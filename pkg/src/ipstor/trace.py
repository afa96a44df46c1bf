"""Frame capture and analysis: RTT, throughput, protocol hierarchy, run comparison."""

from __future__ import annotations

import csv
import enum
import io
import threading
from dataclasses import dataclass, field
from decimal import Decimal

from .errors import AnalysisError

NS = 1_000_000_000
CSV_HEADER = ["frame_no", "time", "src", "dst", "protocol", "info",
              "wire_len", "payload_len", "direction", "task_tag"]
SEGMENT_SUFFIX = "segment of a reassembled PDU]"
# bottom-up order used for the hierarchy listing
LAYER_ORDER = ("ESP", "TCP", "RECORD", "iSCSI")
SERVICES = {3260: "iscsi-target"}


class Direction(enum.Enum):
    I2T = "i2t"
    T2I = "t2i"


@dataclass(frozen=True)
class TraceRecord:
    frame_no: int
    time_ns: int
    src: str
    dst: str
    protocol: str
    info: str
    wire_len: int
    payload_len: int
    direction: Direction
    task_tag: int | None = None

    @property
    def time(self):
        return self.time_ns / NS


def endpoint_text(addr):
    return f"{addr[0]}:{addr[1]}"


def port_name(port):
    return SERVICES.get(port, str(port))


def segment_info(label):
    return f"[{label} {SEGMENT_SUFFIX}"


def ack_info(src_port, dst_port):
    return f"{port_name(src_port)} > {port_name(dst_port)} [ACK]"


@dataclass(frozen=True)
class FrameEvent:
    time_ns: int
    src: tuple[str, int]
    dst: tuple[str, int]
    protocol: str
    info: str | None
    wire_len: int
    payload_len: int
    direction: Direction
    task_tag: int | None = None


class Trace:
    """Append-only frame log; safe for concurrent producers.

    Frames may be appended out of time order (the simulator stamps some frames
    with future arrival times); :meth:`records` returns the merged view.
    """

    def __init__(self):
        self._events = []
        self._lock = threading.Lock()

    def record(self, event: FrameEvent):
        with self._lock:
            self._events.append(event)

    def __len__(self):
        return len(self._events)

    def records(self):
        with self._lock:
            events = list(self._events)
        events.sort(key=lambda e: e.time_ns)  # stable: ties keep append order
        out = []
        for n, e in enumerate(events, 1):
            info = e.info
            if info is None:
                info = ack_info(e.src[1], e.dst[1])
            out.append(TraceRecord(n, e.time_ns, endpoint_text(e.src), endpoint_text(e.dst),
                                   e.protocol, info, e.wire_len, e.payload_len,
                                   e.direction, e.task_tag))
        return out


def record_frame(trace, event):
    trace.record(event)


def _records(trace):
    return trace.records() if isinstance(trace, Trace) else list(trace)


# --- export / import -------------------------------------------------------------

def format_time(ns, places=6):
    return f"{Decimal(ns).scaleb(-9):.{places}f}"


def _host(text):
    return text.rsplit(":", 1)[0]


def export_text(trace) -> str:
    return "".join(
        f"{r.frame_no} {format_time(r.time_ns)} {_host(r.src)} {_host(r.dst)} "
        f"{r.protocol} {r.info}\n" for r in _records(trace))


def export_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in _records(trace):
        w.writerow([r.frame_no, format_time(r.time_ns, 9), r.src, r.dst, r.protocol,
                    r.info, r.wire_len, r.payload_len, r.direction.value,
                    "" if r.task_tag is None else r.task_tag])
    return buf.getvalue()


def import_csv(text) -> list[TraceRecord]:
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header != CSV_HEADER:
        raise AnalysisError(f"unexpected trace CSV header {header!r}")
    out = []
    for row in rows:
        if not row:
            continue
        try:
            out.append(TraceRecord(
                int(row[0]), int(Decimal(row[1]).scaleb(9)), row[2], row[3], row[4],
                row[5], int(row[6]), int(row[7]), Direction(row[8]),
                int(row[9]) if row[9] else None))
        except (ValueError, IndexError, ArithmeticError) as exc:
            raise AnalysisError(f"bad trace row {row!r}: {exc}") from None
    return out


# --- RTT -------------------------------------------------------------------------

@dataclass(frozen=True)
class RttSample:
    index: int
    task_tag: int
    rtt: float


_COMMAND_PREFIXES = ("NOP Out", "SCSI: Read(10)", "SCSI: Write(10)", "SCSI: Command")
_STATUS_PREFIXES = ("NOP In", "SCSI: Response")


def rtt_series(trace):
    """Command-level round trips, matched by task tag.

    Returns ``(samples, orphans)``. A command's clock starts at the first
    initiator frame carrying its tag and stops at the frame completing its
    status (SCSI Response or NOP In).
    """
    first_seen = {}
    open_cmds = {}
    samples = []
    ordinal = 0
    for r in _records(trace):
        tag = r.task_tag
        if tag is None:
            continue
        if r.direction is Direction.I2T:
            first_seen.setdefault(tag, r.time_ns)
            if r.info.endswith(SEGMENT_SUFFIX):
                continue
            start = first_seen.pop(tag)
            if r.info.startswith(_COMMAND_PREFIXES):
                if tag in open_cmds:
                    raise AnalysisError(f"task tag 0x{tag:08x} reused while in flight")
                open_cmds[tag] = (ordinal, start)
                ordinal += 1
        elif r.info.startswith(_STATUS_PREFIXES) and tag in open_cmds:
            index, start = open_cmds.pop(tag)
            samples.append(RttSample(index, tag, (r.time_ns - start) / NS))
    samples.sort(key=lambda s: s.index)
    return samples, len(open_cmds)


# --- throughput ------------------------------------------------------------------

@dataclass(frozen=True)
class ThroughputBucket:
    t_start: float
    bits: int
    width: float
    wire_bits: int = 0


def throughput_series(trace, bucket_width=0.1):
    """Goodput per time bucket over the span of data-bearing frames.

    Returns ``(buckets, mean_goodput)``; ``mean_goodput`` is bits/s over
    first-to-last data frame, or ``None`` when that span is empty.
    """
    if not bucket_width > 0:
        raise ValueError("bucket_width must be > 0")
    width_ns = round(bucket_width * NS)
    records = _records(trace)
    data = [r for r in records if r.payload_len > 0]
    if not data:
        return [], None
    first = min(r.time_ns for r in data) // width_ns
    last = max(r.time_ns for r in data) // width_ns
    bits = [0] * (last - first + 1)
    wire = [0] * (last - first + 1)
    for r in records:
        i = r.time_ns // width_ns - first
        if 0 <= i < len(bits):
            bits[i] += r.payload_len * 8
            wire[i] += r.wire_len * 8
    buckets = [ThroughputBucket((first + i) * width_ns / NS, b, width_ns / NS, w)
               for i, (b, w) in enumerate(zip(bits, wire))]
    span = data[-1].time_ns - data[0].time_ns
    mean = sum(bits) * NS / span if span > 0 else None
    return buckets, mean


# --- protocol hierarchy ------------------------------------------------------------

def protocol_hierarchy(trace):
    counts = {}
    for r in _records(trace):
        frames, nbytes = counts.get(r.protocol, (0, 0))
        counts[r.protocol] = (frames + 1, nbytes + r.wire_len)

    def rank(label):
        return (LAYER_ORDER.index(label), "") if label in LAYER_ORDER else (len(LAYER_ORDER), label)
    return [(label, *counts[label]) for label in sorted(counts, key=rank)]


def format_hierarchy(rows):
    total_frames = sum(f for _, f, _ in rows) or 1
    total_bytes = sum(b for _, _, b in rows) or 1
    lines = [f"{'Protocol':<10}{'Frames':>10}{'% Frames':>10}{'Bytes':>14}{'% Bytes':>10}"]
    for label, frames, nbytes in rows:
        lines.append(f"{label:<10}{frames:>10}{100 * frames / total_frames:>9.2f}%"
                     f"{nbytes:>14}{100 * nbytes / total_bytes:>9.2f}%")
    return "\n".join(lines) + "\n"


# --- run reports and comparison ----------------------------------------------------

@dataclass
class RunReport:
    mode: str
    config: dict
    rtt: list[RttSample] = field(default_factory=list)
    throughput: list[ThroughputBucket] = field(default_factory=list)
    hierarchy: list[tuple[str, int, int]] = field(default_factory=list)
    wire_bytes: int = 0
    payload_bytes: int = 0
    duration: float = 0.0
    mean_rtt: float | None = None
    mean_goodput: float | None = None
    orphans: int = 0
    data_sha256: str = ""
    integrity_ok: bool = False

    def to_dict(self):
        return {
            "mode": self.mode, "config": self.config,
            "rtt": [[s.index, s.task_tag, s.rtt] for s in self.rtt],
            "throughput": [[b.t_start, b.bits, b.width, b.wire_bits] for b in self.throughput],
            "hierarchy": [list(h) for h in self.hierarchy],
            "wire_bytes": self.wire_bytes, "payload_bytes": self.payload_bytes,
            "duration": self.duration, "mean_rtt": self.mean_rtt,
            "mean_goodput": self.mean_goodput, "orphans": self.orphans,
            "data_sha256": self.data_sha256, "integrity_ok": self.integrity_ok,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["mode"], d["config"],
            [RttSample(*s) for s in d["rtt"]],
            [ThroughputBucket(*b) for b in d["throughput"]],
            [tuple(h) for h in d["hierarchy"]],
            d["wire_bytes"], d["payload_bytes"], d["duration"], d["mean_rtt"],
            d["mean_goodput"], d["orphans"], d["data_sha256"], d["integrity_ok"])


def _pick(seq, n):
    if len(seq) <= n:
        return list(seq)
    return [seq[round(k * (len(seq) - 1) / (n - 1))] for k in range(n)]


@dataclass
class ModeGroup:
    name: str
    rtt_pairs: list[tuple]
    throughput_pairs: list[tuple]
    mean_rtt: float | None = None
    mean_goodput: float | None = None
    wire_bytes: int | None = None


@dataclass
class ComparisonTable:
    groups: list[ModeGroup]
    verdict: str = ""
    header: list[str] = field(default_factory=list)


# keys that must agree before two runs may be compared
_WORKLOAD_KEYS = ("size_bytes", "block_size", "seed", "pings", "transport",
                  "delay_s", "bandwidth_bps", "mtu")


def _verdict(groups):
    rtts = [g.mean_rtt for g in groups]
    goods = [g.mean_goodput for g in groups]
    if len(set(rtts)) <= 1 and len(set(goods)) <= 1:
        return "verdict: tie"
    parts = []
    known = [g for g in groups if g.mean_rtt is not None]
    if known and len({g.mean_rtt for g in known}) > 1:
        best = min(known, key=lambda g: g.mean_rtt)
        parts.append(f"lowest mean RTT: {best.name}")
    known = [g for g in groups if g.mean_goodput is not None]
    if known and len({g.mean_goodput for g in known}) > 1:
        best = max(known, key=lambda g: g.mean_goodput)
        parts.append(f"highest mean goodput: {best.name}")
    return "verdict: " + ("; ".join(parts) if parts else "tie")


def compare_runs(reports, rows=4):
    """Build the mode x {RTT pairs, throughput pairs} comparison table.

    ``reports`` is a list of ``(mode_name, RunReport)``.
    """
    if len(reports) < 2:
        raise AnalysisError("need at least two runs to compare")
    base = reports[0][1]
    for _, rep in reports[1:]:
        for key in _WORKLOAD_KEYS:
            if rep.config.get(key) != base.config.get(key):
                raise AnalysisError(
                    f"workloads differ on {key}: {base.config.get(key)!r} vs {rep.config.get(key)!r}")
        if rep.data_sha256 != base.data_sha256:
            raise AnalysisError("workload data differs between runs")
    groups = []
    for name, rep in reports:
        groups.append(ModeGroup(
            name,
            [(s.index, s.rtt) for s in _pick(rep.rtt, rows)],
            [(b.t_start, b.bits) for b in _pick(rep.throughput, rows)],
            rep.mean_rtt, rep.mean_goodput, rep.wire_bytes))
    header = [f"workload: {base.config.get('size_bytes')} bytes in "
              f"{base.config.get('block_size')}-byte blocks, {base.config.get('pings')} pings, "
              f"seed {base.config.get('seed')}, transport {base.config.get('transport')}",
              "desk-scale workload; absolute values are not comparable to a LAN testbed"]
    return ComparisonTable(groups, _verdict(groups), header)


def _num(x):
    if x is None:
        return "-"
    if isinstance(x, int):
        return str(x)
    return f"{x:.6g}"


def _pair(p):
    return f"({_num(p[0])}, {_num(p[1])})" if p else ""


def render_comparison_text(table) -> str:
    c1 = "Round trip time values (Sequence no, Time [s])"
    c2 = "Throughput values (Time [s], No of bits)"
    name_w = max([len(g.name) for g in table.groups] + [4]) + 2
    w1 = max([len(c1)] + [len(_pair(p)) for g in table.groups for p in g.rtt_pairs]) + 2
    lines = [f"# {h}" for h in table.header]
    lines.append(f"{'Mode':<{name_w}}{c1:<{w1}}{c2}")
    for g in table.groups:
        n = max(len(g.rtt_pairs), len(g.throughput_pairs), 1)
        for i in range(n):
            rtt = _pair(g.rtt_pairs[i]) if i < len(g.rtt_pairs) else ""
            tput = _pair(g.throughput_pairs[i]) if i < len(g.throughput_pairs) else ""
            lines.append(f"{g.name if i == 0 else '':<{name_w}}{rtt:<{w1}}{tput}".rstrip())
    lines.append("")
    lines.append(f"{'Mode':<{name_w}}{'mean RTT [s]':>14}{'mean goodput [bit/s]':>22}"
                 f"{'wire bytes':>14}")
    for g in table.groups:
        lines.append(f"{g.name:<{name_w}}{_num(g.mean_rtt):>14}{_num(g.mean_goodput):>22}"
                     f"{_num(g.wire_bytes):>14}")
    if table.verdict:
        lines.append("")
        lines.append(table.verdict)
    return "\n".join(lines) + "\n"


COMPARISON_CSV_HEADER = ["mode", "row", "rtt_index", "rtt_s", "throughput_time_s",
                         "throughput_bits", "mean_rtt_s", "mean_goodput_bps", "wire_bytes"]


def render_comparison_csv(table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_CSV_HEADER)
    for g in table.groups:
        for i in range(max(len(g.rtt_pairs), len(g.throughput_pairs))):
            rtt = g.rtt_pairs[i] if i < len(g.rtt_pairs) else ("", "")
            tput = g.throughput_pairs[i] if i < len(g.throughput_pairs) else ("", "")
            w.writerow([g.name, i + 1, *rtt, *tput, "", "", ""])
        w.writerow([g.name, "summary", "", "", "", "",
                    "" if g.mean_rtt is None else g.mean_rtt,
                    "" if g.mean_goodput is None else g.mean_goodput,
                    "" if g.wire_bytes is None else g.wire_bytes])
    return buf.getvalue()
