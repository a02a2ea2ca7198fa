"""Randomized end-to-end self check.

Concurrent writers issue random aligned writes; afterwards every published
version is read back and compared with a flat buffer that replays the
writes in publication order.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass, field

import numpy as np

from verblob.cluster import SimCluster, deploy_local
from verblob.versioning import check_event_log


@dataclass
class VerifyReport:
    runs: int = 0
    versions_checked: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _script(rng: random.Random, clients: int, writes: int, pages: int) -> list[list[tuple[int, int, int]]]:
    out = []
    for _ in range(clients):
        ops = []
        for _ in range(writes):
            n = min(pages, 1 + int(rng.expovariate(1 / 8)))
            ops.append((rng.randrange(pages - n + 1), n, rng.getrandbits(32)))
        out.append(ops)
    return out


def verify_once(cluster, seed: int, clients: int, writes: int, page_size: int, block_size: int) -> tuple[int, list[str]]:
    rng = random.Random(seed)
    pages = block_size // page_size
    script = _script(rng, clients, writes, pages)
    bid = cluster.client(seed=seed).alloc(page_size, block_size)
    done: dict[int, tuple[int, bytes]] = {}
    errors: list[str] = []
    lock = threading.Lock()

    def writer(i: int) -> None:
        client = cluster.client(seed=seed * 1000 + i)
        for first, n, s in script[i]:
            data = np.random.default_rng(s).bytes(n * page_size)
            v = client.write(bid, data, first * page_size)
            with lock:
                done[v] = (first * page_size, data)

    if isinstance(cluster, SimCluster):
        for i in range(clients):
            cluster.net.spawn(writer, i, name=f"writer-{i}")
        cluster.net.run()
    else:
        threads = [threading.Thread(target=writer, args=(i,)) for i in range(clients)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    reader = cluster.client()
    latest = reader.latest(bid)
    if sorted(done) != list(range(1, latest + 1)):
        errors.append(f"seed {seed}: published versions {sorted(done)} but latest is {latest}")
    flat = bytearray(block_size)
    for v in range(latest + 1):
        if v in done:
            off, data = done[v]
            flat[off:off + len(data)] = data
        got = reader.read(bid, 0, block_size, v)
        if got != flat:
            errors.append(f"seed {seed}: version {v} differs from the replayed writes")
    if isinstance(cluster, SimCluster):
        errors += [f"seed {seed}: {p}" for p in check_event_log(cluster.vm.events)]
    return latest + 1, errors


def verify(
    *,
    runs: int = 10,
    clients: int = 4,
    writes: int = 4,
    page_size: int = 4096,
    block_size: int = 1 << 20,
    data_providers: int = 4,
    metadata_providers: int = 4,
    seed: int = 0,
    transport: str = "inproc",
) -> VerifyReport:
    report = VerifyReport()
    for r in range(runs):
        s = seed + r
        with deploy_local(data_providers, metadata_providers, transport=transport, seed=s) as cluster:
            checked, errors = verify_once(cluster, s, clients, writes, page_size, block_size)
        report.runs += 1
        report.versions_checked += checked
        report.failures += errors
    return report
