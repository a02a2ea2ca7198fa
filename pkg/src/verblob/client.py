"""Client library: alloc / write / read over the distributed services.

A write runs in four stages:

1. store every page on a data provider (least-loaded first), in parallel;
2. get a version number, then store every tree node that lies entirely
   inside the written range;
3. wait for permission to complete, copy the keys of untouched subtrees
   from the previous published version and store the boundary nodes;
4. confirm, which publishes the version.

Any failure after stage 1 aborts the version so the manager's queue keeps
moving. Reads resolve the version, walk the tree and fetch pages in
parallel, zero-filling ranges that were never written.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from verblob.block import BlockDescriptor, ByteRange, range_to_pages
from verblob.errors import (
    CapacityExceeded,
    GatewayUnreachable,
    ManagerUnreachable,
    MetadataMissing,
    NoProvidersAvailable,
    PageConflict,
    ReadFailed,
    StoreError,
    TransportError,
    WriteAborted,
)
from verblob.kv import KvRing, RingConfig
from verblob.manager import ProviderManagerClient
from verblob.provider import fetch_request, parse_fetch, store_request
from verblob.transport import Transport
from verblob.tree import (
    PagePlacement,
    TreeNode,
    WritePlan,
    check_aligned,
    decode_node,
    encode_node,
    plan_read,
    plan_write,
    predecessor_keys,
    resolve_boundary,
)
from verblob.versioning import VersioningClient
from verblob.wire import Endpoint


@dataclass(frozen=True)
class ClientConfig:
    versioning: Endpoint
    provider_manager: Endpoint
    gateways: tuple[Endpoint, ...]
    max_in_flight: int = 64
    store_retries: int = 3
    seed: Optional[int] = None
    # longest single wait for completion permission before re-asking
    completion_wait: float = 1.0

    def __post_init__(self) -> None:
        if not self.gateways:
            raise ValueError("at least one metadata gateway is required")


@dataclass
class OpTimings:
    """Wall-clock split of one operation, in seconds."""

    total: float = 0.0
    metadata: float = 0.0
    data: float = 0.0


@dataclass
class WriteSession:
    """One write, exposed stage by stage.

    :meth:`Client.write` drives all stages; tests and benchmarks drive them
    individually to inject failures or time them.
    """

    client: Client
    descriptor: BlockDescriptor
    buffer: bytes
    offset: int
    placements: list[PagePlacement] = field(default_factory=list)
    version: Optional[int] = None
    plan: Optional[WritePlan] = None
    predecessor: Optional[int] = None
    timings: OpTimings = field(default_factory=OpTimings)

    @property
    def block_id(self) -> bytes:
        return self.descriptor.block_id

    def store_pages(self) -> None:
        t0 = time.perf_counter()
        self.placements = self.client._store_pages(self.descriptor, self.buffer, self.offset)
        self.timings.data += time.perf_counter() - t0

    def publish_interior(self) -> int:
        t0 = time.perf_counter()
        self.version = self.client.vm.begin_write(self.block_id)
        rng = ByteRange(self.offset, len(self.buffer))
        self.plan = plan_write(self.descriptor, rng, self.placements, self.version)
        self.client.ring.put_many([(k, encode_node(n)) for k, n in self.plan.stage2_nodes])
        self.timings.metadata += time.perf_counter() - t0
        return self.version

    def wait_permission(self) -> int:
        t0 = time.perf_counter()
        wait = min(self.client.config.completion_wait, self.client.transport.max_server_wait)
        pred = None
        while pred is None:
            pred = self.client.vm.request_completion(self.block_id, self.version, wait)
        self.predecessor = pred
        self.timings.metadata += time.perf_counter() - t0
        return pred

    def publish_boundary(self) -> None:
        t0 = time.perf_counter()
        keys = predecessor_keys(self.plan, self.predecessor, self.client.fetch_nodes)
        nodes = resolve_boundary(self.plan, lambda off, size: keys[(off, size)])
        if nodes:
            self.client.ring.put_many([(k, encode_node(n)) for k, n in nodes])
        self.timings.metadata += time.perf_counter() - t0

    def confirm(self) -> int:
        t0 = time.perf_counter()
        self.client.vm.complete_write(self.block_id, self.version)
        self.timings.metadata += time.perf_counter() - t0
        return self.version

    def abort(self) -> None:
        if self.version is not None:
            self.client.vm.abort_write(self.block_id, self.version)

    def run(self) -> int:
        t0 = time.perf_counter()
        self.store_pages()
        try:
            self.publish_interior()
            self.wait_permission()
            self.publish_boundary()
            self.confirm()
        except StoreError as exc:
            try:
                self.abort()
            except StoreError:
                pass  # the manager's idle timeout reclaims the ticket
            raise WriteAborted(f"write of version {self.version} aborted: {exc}") from exc
        self.timings.total = time.perf_counter() - t0
        return self.version


class Client:
    """Thread-safe handle; operations on it may run concurrently."""

    def __init__(self, transport: Transport, config: ClientConfig) -> None:
        self.transport = transport
        self.config = config
        self.vm = VersioningClient(transport, config.versioning)
        self.pm = ProviderManagerClient(transport, config.provider_manager)
        self.ring = KvRing(transport, RingConfig.of(config.gateways), window=config.max_in_flight)
        self._rng = random.Random(config.seed) if config.seed is not None else random.SystemRandom()
        self._rng_lock = threading.Lock()

    def _page_id(self) -> bytes:
        with self._rng_lock:
            return self._rng.getrandbits(128).to_bytes(16, "big")

    def _manager(self, fn, *args):
        try:
            return fn(*args)
        except TransportError as exc:
            raise ManagerUnreachable(str(exc)) from exc

    # -- API -------------------------------------------------------------

    def alloc(self, page_size: int, data_size: int) -> bytes:
        return self._manager(self.vm.create_block, page_size, data_size).block_id

    def latest(self, block_id: bytes) -> int:
        return self._manager(self.vm.latest, block_id)[0]

    def descriptor(self, block_id: bytes) -> BlockDescriptor:
        return self._manager(self.vm.latest, block_id)[1]

    def start_write(self, block_id: bytes, buffer: bytes, offset: int) -> WriteSession:
        desc = self.descriptor(block_id)
        check_aligned(desc, ByteRange(offset, len(buffer)))
        return WriteSession(self, desc, bytes(buffer), offset)

    def write(self, block_id: bytes, buffer: bytes, offset: int, *, timings: Optional[OpTimings] = None) -> int:
        """Write ``buffer`` at ``offset``; returns the new version."""
        session = self.start_write(block_id, buffer, offset)
        version = session.run()
        if timings is not None:
            timings.total, timings.metadata, timings.data = (
                session.timings.total, session.timings.metadata, session.timings.data,
            )
        return version

    def read(
        self, block_id: bytes, offset: int, size: int, version: Optional[int] = None,
        *, timings: Optional[OpTimings] = None,
    ) -> bytes:
        """Read ``size`` bytes at ``offset``; latest published version by default."""
        return self.read_versioned(block_id, offset, size, version, timings=timings)[1]

    def read_versioned(
        self, block_id: bytes, offset: int, size: int, version: Optional[int] = None,
        *, timings: Optional[OpTimings] = None,
    ) -> tuple[int, bytes]:
        t0 = time.perf_counter()
        version, desc = self._manager(self.vm.latest, block_id, version)
        rng = ByteRange(offset, size)
        rng.check(desc)
        try:
            pages = plan_read(desc, rng, version, self.fetch_nodes)
        except (MetadataMissing, GatewayUnreachable) as exc:
            raise ReadFailed(str(exc)) from exc
        t1 = time.perf_counter()
        data = self._fetch_pages(desc, rng, pages)
        t2 = time.perf_counter()
        if timings is not None:
            timings.total, timings.metadata, timings.data = t2 - t0, t1 - t0, t2 - t1
        return version, data

    # -- internals -------------------------------------------------------

    def fetch_nodes(self, keys) -> list[Optional[TreeNode]]:
        return [None if raw is None else decode_node(raw) for raw in self.ring.get_many(keys)]

    def _store_pages(self, desc: BlockDescriptor, buffer: bytes, offset: int) -> list[PagePlacement]:
        ps = desc.page_size
        first, last = range_to_pages(ByteRange(offset, len(buffer)), ps)
        count = last - first + 1
        providers = self.pm.list_active(max(count, self.config.store_retries + 1))

        # the list comes back least-loaded first; deal pages out round-robin
        choice = {i: (i - first) % len(providers) for i in range(first, last + 1)}

        tried = {i: {choice[i]} for i in choice}
        todo = list(range(first, last + 1))
        placed: dict[int, PagePlacement] = {}
        attempts = 0
        while todo:
            batch = []
            for i in todo:
                p = providers[choice[i]]
                batch.append(PagePlacement(i, self._page_id(), p.provider_id, p.endpoint))
            reqs = [
                store_request(pl.endpoint, pl.page_id, buffer[(pl.page_index - first) * ps:(pl.page_index - first + 1) * ps])
                for pl in batch
            ]
            results = self.transport.call_many(reqs, window=self.config.max_in_flight)
            retry = []
            for pl, res in zip(batch, results):
                if not isinstance(res, BaseException):
                    placed[pl.page_index] = pl
                    continue
                if not isinstance(res, (CapacityExceeded, TransportError, PageConflict)):
                    raise res
                if attempts >= self.config.store_retries:
                    raise res
                i = pl.page_index
                if not isinstance(res, PageConflict):
                    # move on to the next provider this page has not tried
                    nxt = next((r for r in range(len(providers)) if r not in tried[i]), None)
                    if nxt is None:
                        raise NoProvidersAvailable(f"no provider left for page {i}: {res}") from res
                    tried[i].add(nxt)
                    choice[i] = nxt
                retry.append(i)
            todo = retry
            attempts += 1
        return [placed[i] for i in range(first, last + 1)]

    def _fetch_pages(self, desc: BlockDescriptor, rng: ByteRange, pages) -> bytes:
        ps = desc.page_size
        first = pages[0][0]
        out = bytearray(len(pages) * ps)
        wanted = [(i, pl) for i, pl in pages if pl is not None]
        reqs = [fetch_request(pl.endpoint, pl.page_id) for _, pl in wanted]
        results = self.transport.call_many(reqs, window=self.config.max_in_flight)
        for (i, pl), res in zip(wanted, results):
            if isinstance(res, BaseException):
                raise ReadFailed(f"page {i} from provider {pl.provider_id}: {res}") from res
            data = parse_fetch(res)
            if data is None or len(data) != ps:
                raise ReadFailed(f"page {i} missing or truncated on provider {pl.provider_id}")
            start = (i - first) * ps
            out[start:start + ps] = data
        skip = rng.offset - first * ps
        return bytes(out[skip:skip + rng.size])
