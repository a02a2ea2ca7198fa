"""Command-line entry point: ``verblob <command> ...``.

``deploy`` starts a loopback constellation and writes its layout to a JSON
file; ``alloc``, ``write`` and ``read`` talk to it through that file. The
benchmark and verify commands start (and stop) their own constellation.
"""

from __future__ import annotations

import argparse
import logging
import re
import signal
import sys
import threading
from pathlib import Path

from verblob.bench import BenchAborted, bench_concurrent, bench_single, write_csv
from verblob.client import Client
from verblob.cluster import ClusterLayout, TcpCluster
from verblob.errors import StoreError
from verblob.transport import TcpTransport

_UNITS = {"": 1, "k": 1024, "m": 1024**2, "g": 1024**3, "t": 1024**4}


def parse_size(text: str) -> int:
    """Byte count with an optional binary suffix: 4096, 64k, 64KiB, 1G."""
    m = re.fullmatch(r"\s*(\d+)\s*([kmgt]?)(i?b)?\s*", text.lower())
    if not m:
        raise argparse.ArgumentTypeError(f"not a size: {text!r}")
    return int(m.group(1)) * _UNITS[m.group(2)]


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None


def _block_id(text: str) -> bytes:
    try:
        raw = bytes.fromhex(text)
    except ValueError:
        raw = b""
    if len(raw) != 16:
        raise argparse.ArgumentTypeError("block ids are 32 hex digits")
    return raw


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="verblob", description="Versioned RAM blob store: local deployment and benchmarks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def geometry(sp, page="64KiB", block="1GiB"):
        sp.add_argument("--page-size", type=parse_size, default=parse_size(page))
        sp.add_argument("--block-size", type=parse_size, default=parse_size(block))

    def constellation(sp, n=8, m="8"):
        sp.add_argument("--data-providers", type=int, default=n)
        sp.add_argument("--metadata-providers", type=parse_int_list, default=parse_int_list(m),
                        help="gateway count, or a comma-separated sweep for bench-single")
        sp.add_argument("--transport", choices=["inproc", "tcp"], default="tcp")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("deploy", help="start a loopback constellation and wait")
    sp.add_argument("--data-providers", type=int, default=8)
    sp.add_argument("--metadata-providers", type=int, default=8)
    sp.add_argument("--capacity", type=parse_size, default=parse_size("256MiB"))
    sp.add_argument("--cluster", type=Path, required=True, help="where to write the layout JSON")

    sp = sub.add_parser("alloc", help="create a block and print its id")
    sp.add_argument("--cluster", type=Path, required=True)
    geometry(sp)

    sp = sub.add_parser("write", help="write a file (or stdin) at an offset; prints the version")
    sp.add_argument("--cluster", type=Path, required=True)
    sp.add_argument("block", type=_block_id)
    sp.add_argument("--offset", type=parse_size, default=0)
    sp.add_argument("--input", type=Path, help="defaults to stdin")

    sp = sub.add_parser("read", help="read a byte range to a file (or stdout)")
    sp.add_argument("--cluster", type=Path, required=True)
    sp.add_argument("block", type=_block_id)
    sp.add_argument("--offset", type=parse_size, default=0)
    sp.add_argument("--size", type=parse_size, required=True)
    sp.add_argument("--version", type=int, help="defaults to the latest published version")
    sp.add_argument("--output", type=Path, help="defaults to stdout")

    sp = sub.add_parser("bench-single", help="doubling write series then read-back, per metadata sweep point")
    constellation(sp, m="1,4,16")
    geometry(sp)
    sp.add_argument("--start-segment", type=parse_size, default=parse_size("1MiB"))
    sp.add_argument("--segment", type=parse_size, default=parse_size("64MiB"), help="largest segment")
    sp.add_argument("--reps", type=int, default=1)
    sp.add_argument("--csv-out", type=Path)

    sp = sub.add_parser("bench-concurrent", help="k synchronized clients on disjoint ranges")
    constellation(sp)
    geometry(sp)
    sp.add_argument("--segment", type=parse_size, default=parse_size("64MiB"))
    sp.add_argument("--clients", type=parse_int_list, default=[1, 2, 4, 8])
    sp.add_argument("--mode", choices=["read", "write", "both"], default="both")
    sp.add_argument("--reps", type=int, default=1)
    sp.add_argument("--csv-out", type=Path)

    sp = sub.add_parser("verify", help="randomized concurrent writes checked against a flat replay")
    constellation(sp, n=4, m="4")
    geometry(sp, page="4KiB", block="1MiB")
    sp.add_argument("--clients", type=int, default=4)
    sp.add_argument("--reps", type=int, default=10, help="number of independent runs")
    return p


def _client(path: Path) -> tuple[Client, TcpTransport]:
    layout = ClusterLayout.from_json(path.read_text())
    transport = TcpTransport(timeout=60)
    return Client(transport, layout.client_config()), transport


def _emit_csv(rows, path, incomplete=None) -> None:
    if path is None:
        write_csv(rows, sys.stdout, incomplete)
    else:
        with open(path, "w", newline="") as f:
            write_csv(rows, f, incomplete)


def cmd_deploy(args) -> int:
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    with TcpCluster(args.data_providers, args.metadata_providers, capacity=args.capacity) as cluster:
        args.cluster.write_text(cluster.layout.to_json())
        print(f"constellation up; layout in {args.cluster}. Ctrl-C to stop.", file=sys.stderr)
        try:
            stop.wait()
        except KeyboardInterrupt:
            pass
    return 0


def cmd_alloc(args) -> int:
    client, transport = _client(args.cluster)
    try:
        print(client.alloc(args.page_size, args.block_size).hex())
    finally:
        transport.close()
    return 0


def cmd_write(args) -> int:
    data = args.input.read_bytes() if args.input else sys.stdin.buffer.read()
    client, transport = _client(args.cluster)
    try:
        print(client.write(args.block, data, args.offset))
    finally:
        transport.close()
    return 0


def cmd_read(args) -> int:
    client, transport = _client(args.cluster)
    try:
        data = client.read(args.block, args.offset, args.size, args.version)
    finally:
        transport.close()
    if args.output:
        args.output.write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
    return 0


def cmd_bench_single(args) -> int:
    try:
        rows = bench_single(
            data_providers=args.data_providers, sweep=args.metadata_providers, page_size=args.page_size,
            block_size=args.block_size, start_segment=args.start_segment, end_segment=args.segment,
            reps=args.reps, seed=args.seed, transport=args.transport,
        )
    except BenchAborted as exc:
        _emit_csv(exc.rows, args.csv_out, incomplete=repr(exc.cause))
        print(f"benchmark aborted: {exc.cause!r}", file=sys.stderr)
        return 1
    _emit_csv(rows, args.csv_out)
    return 0


def cmd_bench_concurrent(args) -> int:
    modes = ("read", "write") if args.mode == "both" else (args.mode,)
    try:
        rows = bench_concurrent(
            clients=args.clients, modes=modes, segment=args.segment, page_size=args.page_size,
            block_size=args.block_size, data_providers=args.data_providers,
            metadata_providers=args.metadata_providers[0], reps=args.reps, seed=args.seed,
            transport=args.transport,
        )
    except BenchAborted as exc:
        _emit_csv(exc.rows, args.csv_out, incomplete=repr(exc.cause))
        print(f"benchmark aborted: {exc.cause!r}", file=sys.stderr)
        return 1
    _emit_csv(rows, args.csv_out)
    return 0


def cmd_verify(args) -> int:
    from verblob.verify import verify

    report = verify(
        runs=args.reps, clients=args.clients, page_size=args.page_size, block_size=args.block_size,
        data_providers=args.data_providers, metadata_providers=args.metadata_providers[0],
        seed=args.seed, transport=args.transport,
    )
    for line in report.failures:
        print(f"FAIL {line}")
    status = "OK" if report.ok else "FAILED"
    print(f"{status}: {report.runs} runs, {report.versions_checked} versions checked")
    return 0 if report.ok else 1


COMMANDS = {
    "deploy": cmd_deploy,
    "alloc": cmd_alloc,
    "write": cmd_write,
    "read": cmd_read,
    "bench-single": cmd_bench_single,
    "bench-concurrent": cmd_bench_concurrent,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except (StoreError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
