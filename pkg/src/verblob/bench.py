"""Benchmarks: the single-client doubling series and the concurrent series.

Both write CSV rows with one schema (:data:`FIELDS`). Bandwidth is in MB/s
with MB = 10**6 bytes. Every run reads back and compares everything it
wrote before any row is reported; a mismatch aborts the run.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, fields
from typing import Optional, TextIO

import numpy as np

from verblob.client import Client, OpTimings
from verblob.cluster import ClusterLayout, SimCluster, _mp_context, deploy_local
from verblob.errors import StoreError
from verblob.transport import TcpTransport

log = logging.getLogger(__name__)

KiB = 1024
MiB = 1024 * KiB
GiB = 1024 * MiB
MB = 10**6


class VerificationFailed(StoreError):
    pass


@dataclass
class BenchRow:
    experiment: str
    segment_size: int
    clients: int
    metadata_providers: int
    data_providers: int
    total_ms: float
    metadata_ms: float
    data_ms: float
    bandwidth_MBps: float
    repetition: int

    @property
    def metadata_share(self) -> float:
        return self.metadata_ms / self.total_ms if self.total_ms else 0.0


FIELDS = [f.name for f in fields(BenchRow)]


def _row(experiment, size, clients, m, n, t: OpTimings, rep) -> BenchRow:
    return BenchRow(
        experiment, size, clients, m, n,
        t.total * 1e3, t.metadata * 1e3, t.data * 1e3,
        size / t.total / MB if t.total else 0.0, rep,
    )


def write_csv(rows: Iterable[BenchRow], out: TextIO, incomplete: Optional[str] = None) -> None:
    w = csv.DictWriter(out, fieldnames=FIELDS)
    w.writeheader()
    for r in rows:
        d = asdict(r)
        for k in ("total_ms", "metadata_ms", "data_ms", "bandwidth_MBps"):
            d[k] = f"{d[k]:.3f}"
        w.writerow(d)
    if incomplete:
        out.write(f"# incomplete: {incomplete}\n")


def read_csv(text: str) -> list[BenchRow]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    out = []
    for d in csv.DictReader(io.StringIO("\n".join(lines))):
        out.append(BenchRow(
            d["experiment"], int(d["segment_size"]), int(d["clients"]), int(d["metadata_providers"]),
            int(d["data_providers"]), float(d["total_ms"]), float(d["metadata_ms"]), float(d["data_ms"]),
            float(d["bandwidth_MBps"]), int(d["repetition"]),
        ))
    return out


def segment_series(start: int, end: int) -> list[int]:
    """start, 2*start, ... up to and including end."""
    if start <= 0 or end < start:
        raise ValueError("need 0 < start <= end")
    out = []
    size = start
    while size <= end:
        out.append(size)
        size *= 2
    return out


def payload(seed: int, size: int) -> bytes:
    return np.random.default_rng(seed).bytes(size)


class BenchAborted(Exception):
    """Carries the rows gathered before a failure."""

    def __init__(self, rows: list[BenchRow], cause: BaseException) -> None:
        super().__init__(str(cause))
        self.rows = rows
        self.cause = cause


def single_client_cycle(
    client: Client, block_id: bytes, sizes: Sequence[int], *, m: int, n: int, rep: int, seed: int,
    rows: Optional[list[BenchRow]] = None,
) -> list[BenchRow]:
    """Doubling write series from offset 0, then read each segment back.

    Rows are appended to ``rows`` as they are measured, so a caller keeps
    the partial series if a later step fails.
    """
    rows = [] if rows is None else rows
    segments = []
    offset = 0
    for k, size in enumerate(sizes):
        data = payload(seed * 1000 + k, size)
        t = OpTimings()
        client.write(block_id, data, offset, timings=t)
        rows.append(_row("single_write", size, 1, m, n, t, rep))
        segments.append((offset, data))
        offset += size
    for offset, data in segments:
        t = OpTimings()
        got = client.read(block_id, offset, len(data), timings=t)
        if got != data:
            raise VerificationFailed(f"segment at {offset} read back different bytes")
        rows.append(_row("single_read", len(data), 1, m, n, t, rep))
    return rows


def _collect(cluster, protocol_log: Optional[list]) -> None:
    if protocol_log is not None and isinstance(cluster, SimCluster):
        protocol_log.extend(cluster.net.trace)
        protocol_log.extend(cluster.vm.events)


def bench_single(
    *,
    data_providers: int = 8,
    sweep: Sequence[int] = (1, 4, 16),
    page_size: int = 64 * KiB,
    block_size: int = GiB,
    start_segment: int = MiB,
    end_segment: int = 64 * MiB,
    reps: int = 1,
    seed: int = 0,
    transport: str = "tcp",
    capacity: int = 256 * MiB,
    protocol_log: Optional[list] = None,
) -> list[BenchRow]:
    """Doubling write series then read-back, once per metadata sweep point.

    ``protocol_log`` collects the network trace and version events of
    in-process runs, which are identical for equal seeds.
    """
    sizes = segment_series(start_segment, end_segment)
    if sum(sizes) > block_size:
        raise ValueError("segment series does not fit in the block")
    rows: list[BenchRow] = []
    if reps == 0:
        return rows
    try:
        for m in sweep:
            with deploy_local(data_providers, m, capacity, transport=transport, seed=seed) as cluster:
                client = cluster.client(seed=seed)
                block_id = client.alloc(page_size, block_size)
                for rep in range(reps):
                    single_client_cycle(
                        client, block_id, sizes, m=m, n=data_providers, rep=rep, seed=seed + rep, rows=rows
                    )
                _collect(cluster, protocol_log)
    except Exception as exc:
        raise BenchAborted(rows, exc) from exc
    return rows


# ---------------------------------------------------------------------------
# concurrent clients


def _client_job(layout_json: str, block_id: bytes, mode: str, offset: int, size: int, seed: int, barrier, out) -> None:
    """Body of one benchmark client process."""
    transport = TcpTransport(timeout=120.0)
    try:
        client = Client(transport, ClusterLayout.from_json(layout_json).client_config(seed=seed))
        data = payload(seed, size) if mode == "write" else None
        barrier.wait()
        t = OpTimings()
        start = time.monotonic()
        if mode == "write":
            client.write(block_id, data, offset, timings=t)
            ok = True
        else:
            got = client.read(block_id, offset, size, timings=t)
            ok = got == payload(seed, size)
        end = time.monotonic()
        out.put((offset, start, end, t.total, t.metadata, t.data, ok, None))
    except Exception as exc:
        out.put((offset, 0.0, 0.0, 0.0, 0.0, 0.0, False, repr(exc)))
    finally:
        transport.close()


def _run_clients_tcp(layout: ClusterLayout, block_id, mode, k, segment, seeds) -> list[tuple]:
    ctx = _mp_context()
    barrier = ctx.Barrier(k)
    out = ctx.Queue()
    procs = [
        ctx.Process(target=_client_job, args=(layout.to_json(), block_id, mode, i * segment, segment, seeds[i], barrier, out))
        for i in range(k)
    ]
    for p in procs:
        p.start()
    results = [out.get(timeout=600) for _ in procs]
    for p in procs:
        p.join(timeout=30)
    return results


def _run_clients_sim(cluster: SimCluster, block_id, mode, k, segment, seeds) -> list[tuple]:
    results = []

    def job(i: int) -> None:
        client = cluster.client(seed=seeds[i])
        t = OpTimings()
        start = time.monotonic()
        if mode == "write":
            client.write(block_id, payload(seeds[i], segment), i * segment, timings=t)
            ok = True
        else:
            ok = client.read(block_id, i * segment, segment, timings=t) == payload(seeds[i], segment)
        results.append((i * segment, start, time.monotonic(), t.total, t.metadata, t.data, ok, None))

    for i in range(k):
        cluster.net.spawn(job, i)
    cluster.net.run()
    return results


def bench_concurrent(
    *,
    clients: Sequence[int] = (1, 2, 4, 8),
    modes: Sequence[str] = ("read", "write"),
    segment: int = 64 * MiB,
    page_size: int = 64 * KiB,
    block_size: int = GiB,
    data_providers: int = 8,
    metadata_providers: int = 8,
    reps: int = 1,
    seed: int = 0,
    transport: str = "tcp",
    capacity: int = 256 * MiB,
    protocol_log: Optional[list] = None,
) -> list[BenchRow]:
    """k clients on disjoint ranges ``[i*segment, (i+1)*segment)``, started together.

    Emits one row per client, an ``_aggregate`` row (total bytes over the
    makespan) and an ``_ideal`` row (k times the single-client aggregate).
    """
    if max(clients) * segment > block_size:
        raise ValueError("clients * segment exceeds the block size")
    rows: list[BenchRow] = []
    n, m = data_providers, metadata_providers
    try:
        with deploy_local(n, m, capacity, transport=transport, seed=seed) as cluster:
            harness = cluster.client(seed=seed)
            block_id = harness.alloc(page_size, block_size)
            prewritten = 0
            for mode in modes:
                single_bw: dict[int, float] = {}
                for k in clients:
                    for rep in range(reps):
                        seeds = [seed * 7919 + rep * 101 + i for i in range(k)]
                        if mode == "read":
                            # data is prewritten for reads
                            for i in range(k):
                                harness.write(block_id, payload(seeds[i], segment), i * segment)
                            prewritten += k
                        if transport == "tcp":
                            results = _run_clients_tcp(cluster.layout, block_id, mode, k, segment, seeds)
                        else:
                            results = _run_clients_sim(cluster, block_id, mode, k, segment, seeds)
                        for r in results:
                            if r[7] is not None or not r[6]:
                                raise VerificationFailed(f"client at offset {r[0]} failed: {r[7] or 'bad data'}")
                        if mode == "write":
                            for i in range(k):
                                if harness.read(block_id, i * segment, segment) != payload(seeds[i], segment):
                                    raise VerificationFailed(f"segment {i} reads back wrong after concurrent write")
                        makespan = max(r[2] for r in results) - min(r[1] for r in results)
                        for r in sorted(results):
                            t = OpTimings(r[3], r[4], r[5])
                            rows.append(_row(f"concurrent_{mode}", segment, k, m, n, t, rep))
                        agg = OpTimings(makespan, float(np.mean([r[4] for r in results])), float(np.mean([r[5] for r in results])))
                        agg_row = _row(f"concurrent_{mode}_aggregate", k * segment, k, m, n, agg, rep)
                        rows.append(agg_row)
                        if k == 1:
                            single_bw.setdefault(rep, agg_row.bandwidth_MBps)
                        base = single_bw.get(rep)
                        if base is not None:
                            ideal_bw = k * base
                            ideal_ms = k * segment / (ideal_bw * MB) * 1e3 if ideal_bw else 0.0
                            rows.append(BenchRow(
                                f"concurrent_{mode}_ideal", k * segment, k, m, n, ideal_ms, 0.0, 0.0, ideal_bw, rep
                            ))
            _collect(cluster, protocol_log)
    except Exception as exc:
        raise BenchAborted(rows, exc) from exc
    return rows


def aggregate_ratio(rows: Sequence[BenchRow], mode: str, k: int) -> float:
    """Median aggregated / ideal bandwidth for ``mode`` at ``k`` clients."""
    agg = {r.repetition: r.bandwidth_MBps for r in rows if r.experiment == f"concurrent_{mode}_aggregate" and r.clients == k}
    ideal = {r.repetition: r.bandwidth_MBps for r in rows if r.experiment == f"concurrent_{mode}_ideal" and r.clients == k}
    ratios = [agg[rep] / ideal[rep] for rep in agg if ideal.get(rep)]
    return float(np.median(ratios))


def metadata_share(rows: Sequence[BenchRow], experiment: str, m: int, segment_size: int) -> float:
    """Median metadata share of total time for one sweep point and segment."""
    shares = [r.metadata_share for r in rows
              if r.experiment == experiment and r.metadata_providers == m and r.segment_size == segment_size]
    return float(np.median(shares))
