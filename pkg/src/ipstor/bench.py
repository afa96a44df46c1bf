"""Experiment orchestration: run target + initiator per security mode and report."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import random
import statistics
from dataclasses import dataclass

from . import svg
from .channel import CryptoCostModel, LinkParams, SecurityMode, load_psk, make_network
from .errors import IpstorError, UsageError
from .initiator import Initiator, InitiatorConfig
from .pdu import BLOCK_SIZE
from .target import DEFAULT_LUN_BYTES, LunConfig, TargetConfig, TargetServer
from .trace import (NS, RunReport, Trace, compare_runs, export_csv, export_text,
                    format_hierarchy, protocol_hierarchy, render_comparison_csv,
                    render_comparison_text, rtt_series, throughput_series)

log = logging.getLogger(__name__)

MIB = 1 << 20
MODE_TOKENS = ("plain", "ssl", "ipsec", "all")
TARGET_NAME = "iqn.2025-01.lab:disk0"
MEM_PORTAL = ("192.168.2.1", 3260)
MAX_BLOCK = 0xFFFF * BLOCK_SIZE


class ExperimentError(IpstorError):
    """The experiment ran but its outcome is wrong (e.g. read-back mismatch)."""


@dataclass
class ExperimentConfig:
    mode: str = "all"
    transport: str = "mem"
    size_bytes: int = 16 * MIB
    block_size: int = 64 * 1024
    seed: int = 0
    pings: int = 100
    delay_s: float = 0.001
    bandwidth_bps: float | None = 1e9
    mtu: int = 1500
    per_unit_s: float | None = None  # overrides the default for secure modes
    per_byte_s: float | None = None
    bucket_s: float = 0.1
    chap: tuple[str, str] | None = None
    psk: bytes | None = None

    def __post_init__(self):
        if self.mode not in MODE_TOKENS:
            raise UsageError(f"unknown mode {self.mode!r} (choose from {', '.join(MODE_TOKENS)})")
        if self.transport not in ("mem", "tcp"):
            raise UsageError(f"unknown transport {self.transport!r}")
        if self.block_size <= 0 or self.block_size % BLOCK_SIZE or self.block_size > MAX_BLOCK:
            raise UsageError(f"block size must be a multiple of 512 up to {MAX_BLOCK}")
        if self.size_bytes < 0 or self.size_bytes % self.block_size:
            raise UsageError("workload size must be a non-negative multiple of the block size")
        if self.pings < 0:
            raise UsageError("pings must be >= 0")
        if not 0 <= self.seed < 1 << 64:
            raise UsageError("seed must be an unsigned 64-bit integer")
        if not self.bucket_s > 0:
            raise UsageError("bucket width must be > 0")
        try:
            self.link()
            self.costs(SecurityMode.PACKET_LAYER)
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def modes(self):
        if self.mode == "all":
            return list(SecurityMode)
        return [SecurityMode.parse(self.mode)]

    def link(self):
        return LinkParams(self.delay_s, self.bandwidth_bps, self.mtu)

    def costs(self, mode):
        if mode is SecurityMode.PLAIN:
            return CryptoCostModel()
        base = CryptoCostModel.default_for(mode)
        return CryptoCostModel(
            base.per_unit_cost if self.per_unit_s is None else self.per_unit_s,
            base.per_byte_cost if self.per_byte_s is None else self.per_byte_s)

    def echo(self, mode):
        """The configuration as recorded in a report (no secrets)."""
        costs = self.costs(mode)
        return {
            "mode": mode.value, "transport": self.transport, "size_bytes": self.size_bytes,
            "block_size": self.block_size, "seed": self.seed, "pings": self.pings,
            "delay_s": self.delay_s, "bandwidth_bps": self.bandwidth_bps, "mtu": self.mtu,
            "per_unit_s": costs.per_unit_cost, "per_byte_s": costs.per_byte_cost,
            "bucket_s": self.bucket_s, "chap": self.chap is not None,
        }


@dataclass
class ModeRun:
    report: RunReport
    trace: Trace


def make_workload(size, seed):
    return random.Random(seed).randbytes(size)


def diff_offsets(expected, actual, limit=8):
    """First byte offsets where two buffers differ (length mismatch counts)."""
    out = []
    n = min(len(expected), len(actual))
    for block in range(0, n, 4096):
        end = min(block + 4096, n)
        a, b = expected[block:end], actual[block:end]
        if a != b:
            out += [block + i for i in range(len(a)) if a[i] != b[i]][:limit - len(out)]
            if len(out) >= limit:
                return out
    if len(expected) != len(actual) and len(out) < limit:
        out.append(n)
    return out


def run_mode(config, mode, workload=None):
    """One full experiment in ``mode``; returns a :class:`ModeRun`."""
    if workload is None:
        workload = make_workload(config.size_bytes, config.seed)
    trace = Trace()
    psk = config.psk if config.psk is not None else load_psk()
    net = make_network(config.transport, mode, config.link(), config.costs(mode),
                       trace=trace, seed=config.seed, psk=psk)
    listen = MEM_PORTAL if config.transport == "mem" else ("127.0.0.1", 0)
    blocks = max(DEFAULT_LUN_BYTES, len(workload)) // BLOCK_SIZE
    server = TargetServer(TargetConfig(TARGET_NAME, listen, [LunConfig(0, blocks)],
                                       config.chap)).start(net, psk)
    try:
        init = Initiator(InitiatorConfig(portal=server.address, chap=config.chap, psk=psk), net)
        names = [name for name, _ in init.discover()]
        if TARGET_NAME not in names:
            raise ExperimentError(f"discovery did not list {TARGET_NAME}")
        session = init.login(TARGET_NAME)
        for _ in range(config.pings):
            session.nop_ping()
        step = config.block_size
        for off in range(0, len(workload), step):
            session.write(0, off // BLOCK_SIZE, workload[off:off + step])
        readback = b"".join(session.read(0, off // BLOCK_SIZE, step // BLOCK_SIZE)
                            for off in range(0, len(workload), step))
        session.logout()
    finally:
        server.shutdown()
        if hasattr(net, "close_all"):
            net.close_all()
    if readback != workload:
        offsets = diff_offsets(workload, readback)
        raise ExperimentError(f"{mode.label}: read-back differs at offsets {offsets}")
    return ModeRun(build_report(config, mode, trace, workload), trace)


def build_report(config, mode, trace, workload):
    records = trace.records()
    samples, orphans = rtt_series(records)
    buckets, goodput = throughput_series(records, config.bucket_s)
    duration = (records[-1].time_ns - records[0].time_ns) / NS if records else 0.0
    return RunReport(
        mode=mode.label, config=config.echo(mode), rtt=samples, throughput=buckets,
        hierarchy=protocol_hierarchy(records),
        wire_bytes=sum(r.wire_len for r in records),
        payload_bytes=sum(r.payload_len for r in records),
        duration=duration,
        mean_rtt=statistics.fmean(s.rtt for s in samples) if samples else None,
        mean_goodput=goodput, orphans=orphans,
        data_sha256=hashlib.sha256(workload).hexdigest(), integrity_ok=True)


def run_experiment(config):
    """Run every selected mode over the same workload bytes."""
    workload = make_workload(config.size_bytes, config.seed)
    return [run_mode(config, mode, workload) for mode in config.modes()]


# --- output ----------------------------------------------------------------------------

def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def mode_dir_name(report):
    return report.config["mode"]


def render_report(runs, out_dir):
    """Write per-mode files and, for several modes, the comparison table."""
    if not runs:
        raise UsageError("nothing to render")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for run in runs:
        rep = run.report
        d = os.path.join(out_dir, mode_dir_name(rep))
        os.makedirs(d, exist_ok=True)
        files = {
            "trace.csv": export_csv(run.trace),
            "trace.txt": export_text(run.trace),
            "rtt.csv": _csv(["index", "task_tag", "rtt_s"],
                            [(s.index, s.task_tag, s.rtt) for s in rep.rtt]),
            "throughput.csv": _csv(["t_start_s", "width_s", "payload_bits", "wire_bits"],
                                   [(b.t_start, b.width, b.bits, b.wire_bits)
                                    for b in rep.throughput]),
            "hierarchy.txt": format_hierarchy(rep.hierarchy),
            "rtt.svg": svg.line_chart([(s.index, s.rtt) for s in rep.rtt],
                                      f"{rep.mode}: round trip time", "command sequence no",
                                      "RTT [s]"),
            "throughput.svg": svg.line_chart([(b.t_start, b.bits) for b in rep.throughput],
                                             f"{rep.mode}: throughput", "time [s]",
                                             f"payload bits per {rep.config['bucket_s']} s"),
            "report.json": json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n",
        }
        for name, text in files.items():
            _write(os.path.join(d, name), text)
            written.append(os.path.join(d, name))
    if len(runs) > 1:
        written += write_comparison([r.report for r in runs], out_dir)
    return written


def write_comparison(reports, out_dir):
    table = compare_runs([(r.mode, r) for r in reports])
    paths = [os.path.join(out_dir, "comparison.txt"), os.path.join(out_dir, "comparison.csv")]
    _write(paths[0], render_comparison_text(table))
    _write(paths[1], render_comparison_csv(table))
    return paths


def load_reports(paths):
    """Collect ``report.json`` files from run directories or mode subdirectories."""
    reports = []
    for path in paths:
        direct = os.path.join(path, "report.json")
        if os.path.isfile(direct):
            candidates = [direct]
        elif os.path.isdir(path):
            candidates = sorted(os.path.join(path, d, "report.json") for d in os.listdir(path))
            candidates = [c for c in candidates if os.path.isfile(c)]
        else:
            candidates = []
        if not candidates:
            raise UsageError(f"no report.json under {path}")
        for c in candidates:
            with open(c, encoding="utf-8") as fh:
                reports.append(RunReport.from_dict(json.load(fh)))
    return reports


def summary_line(report):
    rtt = "-" if report.mean_rtt is None else f"{report.mean_rtt:.6g} s"
    good = "-" if report.mean_goodput is None else f"{report.mean_goodput:.6g} bit/s"
    return (f"{report.mode:<12} mean RTT {rtt:<14} mean goodput {good:<20} "
            f"wire bytes {report.wire_bytes}  integrity {'ok' if report.integrity_ok else 'FAILED'}")


__all__ = [
    "ExperimentConfig", "ExperimentError", "ModeRun", "build_report", "diff_offsets",
    "load_reports", "make_workload", "render_report", "run_experiment", "run_mode",
    "summary_line", "write_comparison",
]
