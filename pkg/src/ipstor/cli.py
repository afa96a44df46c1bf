"""Command line: ``ipstor bench|target|initiator ...``."""

from __future__ import annotations

import argparse
import logging
import math
import os
import signal
import sys
import threading

from .bench import (MIB, MODE_TOKENS, ExperimentConfig, load_reports, render_report,
                    run_experiment, summary_line, write_comparison)
from .channel import SecurityMode, TcpNetwork, load_psk
from .errors import ConfigError, IpstorError, UsageError
from .initiator import Initiator, InitiatorConfig
from .pdu import BLOCK_SIZE
from .target import DEFAULT_PORT, TargetConfig, TargetServer, parse_address
from .trace import compare_runs, render_comparison_text

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
WRITE_CHUNK = 64 * 1024


def _positive_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return value


def _non_negative_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 <= value < math.inf:
        raise argparse.ArgumentTypeError("must be a finite value >= 0")
    return value


def _non_negative_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _seed(text):
    value = _non_negative_int(text)
    if value >= 1 << 64:
        raise argparse.ArgumentTypeError("must fit in 64 bits")
    return value


def _portal(text):
    try:
        host, port = parse_address(text, DEFAULT_PORT)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return host, port


def _add_chap(p):
    p.add_argument("--chap-user", help="CHAP user name (requires --chap-secret)")
    p.add_argument("--chap-secret", help="CHAP secret shared with the target")


def _chap(args):
    if (args.chap_user is None) != (args.chap_secret is None):
        raise UsageError("--chap-user and --chap-secret must be given together")
    return (args.chap_user, args.chap_secret) if args.chap_user is not None else None


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ipstor", description="Miniature iSCSI stack with pluggable transport security.")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more logging (repeat for debug)")
    top = parser.add_subparsers(dest="command", required=True)

    bench = top.add_parser("bench", help="run or compare experiments").add_subparsers(
        dest="action", required=True)
    run = bench.add_parser("run", help="run target + initiator and write a report")
    run.add_argument("--mode", choices=MODE_TOKENS, default="all",
                     help="security mode, or all three in turn (default: all)")
    run.add_argument("--transport", choices=("mem", "tcp"), default="mem",
                     help="simulated link or real loopback sockets (default: mem)")
    run.add_argument("--size-mb", type=_non_negative_int, default=16,
                     help="workload size in MiB (default: 16)")
    run.add_argument("--block-size", type=int, default=64 * 1024,
                     help="bytes per write/read command, multiple of 512 (default: 65536)")
    run.add_argument("--pings", type=_non_negative_int, default=100,
                     help="NOP pings before the transfer (default: 100)")
    run.add_argument("--mtu", type=int, default=1500, help="link MTU in bytes (default: 1500)")
    run.add_argument("--delay-ms", type=_non_negative_float, default=1.0,
                     help="one-way link delay, mem only (default: 1.0)")
    run.add_argument("--bandwidth-mbps", type=_positive_float, default=1000.0,
                     help="link bandwidth, or 'inf' for unlimited, mem only (default: 1000)")
    run.add_argument("--crypto-per-packet-us", type=_non_negative_float,
                     help="seal/open cost per record or packet, mem only "
                          "(default: 10 for ssl, 50 for ipsec)")
    run.add_argument("--crypto-per-byte-ns", type=_non_negative_float,
                     help="seal/open cost per payload byte, mem only (default: 5)")
    run.add_argument("--bucket-ms", type=int, default=100,
                     help="throughput bucket width (default: 100)")
    run.add_argument("--seed", type=_seed, default=0,
                     help="workload and key-material seed (default: 0)")
    run.add_argument("--out", default="results", help="output directory (default: results)")
    _add_chap(run)

    cmp_ = bench.add_parser("compare", help="compare report directories")
    cmp_.add_argument("dirs", nargs="+", help="run directories or per-mode subdirectories")
    cmp_.add_argument("--out", help="also write comparison.txt/.csv here")

    target = top.add_parser("target", help="iSCSI target").add_subparsers(
        dest="action", required=True)
    serve = target.add_parser("serve", help="serve a target over TCP until interrupted")
    serve.add_argument("config", help="key = value configuration file")
    serve.add_argument("--mode", choices=MODE_TOKENS[:3], default="plain",
                       help="transport security (default: plain)")
    serve.add_argument("--mtu", type=int, default=1500, help="MTU used for framing")

    init = top.add_parser("initiator", help="iSCSI initiator over TCP").add_subparsers(
        dest="action", required=True)
    for name, text in (("discover", "list targets at a portal"),
                       ("ping", "NOP round trips"),
                       ("write", "write a file to a LUN"),
                       ("read", "read blocks from a LUN")):
        p = init.add_parser(name, help=text)
        p.add_argument("--portal", type=_portal, default=("127.0.0.1", DEFAULT_PORT),
                       help="target address host:port (default: 127.0.0.1:3260)")
        p.add_argument("--mode", choices=MODE_TOKENS[:3], default="plain",
                       help="transport security (default: plain)")
        p.add_argument("--mtu", type=int, default=1500, help="MTU used for framing")
        p.add_argument("--name", default=InitiatorConfig.name, help="initiator iqn")
        _add_chap(p)
        if name != "discover":
            p.add_argument("--target", required=True, help="target iqn")
        if name in ("write", "read"):
            p.add_argument("--lun", type=_non_negative_int, default=0)
            p.add_argument("--lba", type=_non_negative_int, default=0)
    ping = init.choices["ping"]
    ping.add_argument("--count", type=_non_negative_int, default=4)
    init.choices["write"].add_argument("--input", required=True,
                                       help="file to write; size must be a multiple of 512")
    rd = init.choices["read"]
    rd.add_argument("--blocks", type=int, required=True, help="512-byte blocks to read")
    rd.add_argument("--output", default="-", help="destination file (default: stdout)")
    return parser


# --- commands --------------------------------------------------------------------

def cmd_bench_run(args):
    if args.bucket_ms <= 0:
        raise UsageError("--bucket-ms must be > 0")
    config = ExperimentConfig(
        mode=args.mode, transport=args.transport, size_bytes=args.size_mb * MIB,
        block_size=args.block_size, seed=args.seed, pings=args.pings,
        delay_s=args.delay_ms / 1000,
        bandwidth_bps=None if math.isinf(args.bandwidth_mbps) else args.bandwidth_mbps * 1e6,
        mtu=args.mtu,
        per_unit_s=None if args.crypto_per_packet_us is None else args.crypto_per_packet_us / 1e6,
        per_byte_s=None if args.crypto_per_byte_ns is None else args.crypto_per_byte_ns / 1e9,
        bucket_s=args.bucket_ms / 1000, chap=_chap(args))
    runs = run_experiment(config)
    try:
        render_report(runs, args.out)
    except OSError as exc:
        raise IpstorError(f"cannot write results to {args.out}: {exc}") from None
    for run in runs:
        print(summary_line(run.report))
    print(f"results written to {args.out}")
    return EXIT_OK


def cmd_bench_compare(args):
    reports = load_reports(args.dirs)
    print(render_comparison_text(compare_runs([(r.mode, r) for r in reports])), end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_comparison(reports, args.out)
    return EXIT_OK


def _network(args, psk=None):
    mode = SecurityMode.parse(args.mode)
    if mode is SecurityMode.PACKET_LAYER and psk is None:
        try:
            psk = load_psk()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return TcpNetwork(mode, args.mtu, psk=psk)


def cmd_target_serve(args):
    config = TargetConfig.load(args.config)
    try:
        psk = load_psk(config.psk) if config.psk else None
    except ValueError as exc:
        raise ConfigError(f"ipsec.psk: {exc}") from None
    server = TargetServer(config).start(_network(args, psk))
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    host, port = server.address
    print(f"serving {config.target_name} on {host}:{port} ({args.mode})", flush=True)
    try:
        stop.wait()
    finally:
        server.shutdown()
    return EXIT_OK


def _initiator(args):
    config = InitiatorConfig(name=args.name, portal=args.portal, chap=_chap(args))
    return Initiator(config, _network(args))


def cmd_initiator(args):
    init = _initiator(args)
    if args.action == "discover":
        for name, (host, port) in init.discover():
            print(f"{name} {host}:{port}")
        return EXIT_OK
    with init.login(args.target) as session:
        if args.action == "ping":
            for i in range(args.count):
                print(f"seq={i} rtt={session.nop_ping() * 1000:.3f} ms")
        elif args.action == "write":
            with open(args.input, "rb") as fh:
                data = fh.read()
            if not data or len(data) % BLOCK_SIZE:
                raise UsageError("input size must be a positive multiple of 512")
            for off in range(0, len(data), WRITE_CHUNK):
                session.write(args.lun, args.lba + off // BLOCK_SIZE, data[off:off + WRITE_CHUNK])
            print(f"wrote {len(data)} bytes at lba {args.lba}")
        else:
            if args.blocks <= 0:
                raise UsageError("--blocks must be >= 1")
            per = WRITE_CHUNK // BLOCK_SIZE
            data = b"".join(session.read(args.lun, args.lba + b, min(per, args.blocks - b))
                            for b in range(0, args.blocks, per))
            if args.output == "-":
                sys.stdout.buffer.write(data)
                sys.stdout.flush()
            else:
                with open(args.output, "wb") as fh:
                    fh.write(data)
    return EXIT_OK


COMMANDS = {
    ("bench", "run"): cmd_bench_run,
    ("bench", "compare"): cmd_bench_compare,
    ("target", "serve"): cmd_target_serve,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS.get((args.command, args.action), cmd_initiator)
    try:
        return handler(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"ipstor: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IpstorError, OSError) as exc:
        print(f"ipstor: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
