"""Provider manager: registry of live data providers ranked by load."""

from __future__ import annotations

import logging
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass, replace

from verblob.errors import DuplicateId, NoProvidersAvailable, UnknownOpcode, UnknownProvider
from verblob.transport import Transport
from verblob.wire import Endpoint, Opcode, Packer, Unpacker

log = logging.getLogger(__name__)

LIVENESS_WINDOW = 10.0
HEARTBEAT_PERIOD = 2.0


@dataclass(frozen=True)
class ProviderInfo:
    provider_id: int
    endpoint: Endpoint
    load_bytes: int
    capacity_bytes: int
    last_heartbeat: float


class ProviderManager:
    def __init__(
        self, clock: Callable[[], float] = time.monotonic, liveness_window: float = LIVENESS_WINDOW
    ) -> None:
        self.clock = clock
        self.liveness_window = liveness_window
        self._providers: dict[int, ProviderInfo] = {}
        self._lock = threading.Lock()

    def register(self, provider_id: int, endpoint: Endpoint, capacity_bytes: int) -> None:
        with self._lock:
            if provider_id in self._providers:
                raise DuplicateId(f"provider {provider_id} already registered")
            self._providers[provider_id] = ProviderInfo(provider_id, endpoint, 0, capacity_bytes, self.clock())

    def heartbeat(self, provider_id: int, load_bytes: int) -> None:
        with self._lock:
            info = self._providers.get(provider_id)
            if info is None:
                raise UnknownProvider(f"provider {provider_id} is not registered")
            self._providers[provider_id] = replace(info, load_bytes=load_bytes, last_heartbeat=self.clock())

    def list_active(self, max_count: int) -> list[ProviderInfo]:
        """Least-loaded live providers first; ties go to the lower id."""
        if max_count < 1:
            raise ValueError("max_count must be >= 1")
        horizon = self.clock() - self.liveness_window
        with self._lock:
            live = [p for p in self._providers.values() if p.last_heartbeat >= horizon]
        if not live:
            raise NoProvidersAvailable("no active data providers")
        live.sort(key=lambda p: (p.load_bytes, p.provider_id))
        return live[:max_count]

    def handle(self, opcode: int, payload: bytes) -> bytes:
        u = Unpacker(payload)
        if opcode == Opcode.PM_REGISTER:
            pid, ep, cap = u.u64(), u.endpoint(), u.u64()
            u.done()
            self.register(pid, ep, cap)
            return b""
        if opcode == Opcode.PM_HEARTBEAT:
            pid, load = u.u64(), u.u64()
            u.done()
            self.heartbeat(pid, load)
            return b""
        if opcode == Opcode.PM_LIST:
            n = u.u32()
            u.done()
            infos = self.list_active(n)
            p = Packer().u32(len(infos))
            for info in infos:
                p.u64(info.provider_id).endpoint(info.endpoint).u64(info.load_bytes).u64(info.capacity_bytes)
            return p.bytes()
        raise UnknownOpcode(f"provider manager does not serve opcode {opcode:#x}")


class ProviderManagerClient:
    def __init__(self, transport: Transport, endpoint: Endpoint) -> None:
        self.transport = transport
        self.endpoint = endpoint

    def register(self, provider_id: int, endpoint: Endpoint, capacity_bytes: int) -> None:
        payload = Packer().u64(provider_id).endpoint(endpoint).u64(capacity_bytes).bytes()
        self.transport.call(self.endpoint, Opcode.PM_REGISTER, payload)

    def heartbeat(self, provider_id: int, load_bytes: int) -> None:
        self.transport.call(self.endpoint, Opcode.PM_HEARTBEAT, Packer().u64(provider_id).u64(load_bytes).bytes())

    def list_active(self, max_count: int) -> list[ProviderInfo]:
        u = Unpacker(self.transport.call(self.endpoint, Opcode.PM_LIST, Packer().u32(max_count).bytes()))
        out = []
        for _ in range(u.u32()):
            pid, ep, load, cap = u.u64(), u.endpoint(), u.u64(), u.u64()
            out.append(ProviderInfo(pid, ep, load, cap, 0.0))
        u.done()
        return out


class LoadReporter:
    """Pushes a provider's load to the manager.

    Until :meth:`start` is called every change is pushed synchronously from
    the store path, at most once per ``min_interval``. Once started, a
    background thread pushes instead: right after each change (coalescing
    bursts, one heartbeat in flight at a time) and every ``period`` seconds
    so an idle provider stays live.
    """

    def __init__(
        self,
        manager: ProviderManagerClient,
        provider_id: int,
        min_interval: float = 0.0,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        self.manager = manager
        self.provider_id = provider_id
        self.min_interval = min_interval
        self.clock = clock
        self._load = 0
        self._dirty = False
        self._last = -float("inf")
        self._cv = threading.Condition()
        self._stopping = False
        self._thread: threading.Thread | None = None

    def __call__(self, load_bytes: int) -> None:
        with self._cv:
            self._load = load_bytes
            if self._thread is not None:
                self._dirty = True
                self._cv.notify()
                return
            now = self.clock()
            if now - self._last < self.min_interval:
                return
            self._last = now
        self.manager.heartbeat(self.provider_id, load_bytes)

    def start(self, period: float = HEARTBEAT_PERIOD) -> None:
        def loop() -> None:
            while True:
                with self._cv:
                    self._cv.wait_for(lambda: self._dirty or self._stopping, timeout=period)
                    if self._stopping:
                        return
                    self._dirty = False
                    load = self._load
                try:
                    self.manager.heartbeat(self.provider_id, load)
                except Exception:
                    log.warning("heartbeat of provider %d failed", self.provider_id, exc_info=True)

        with self._cv:
            self._thread = threading.Thread(target=loop, name=f"heartbeat-{self.provider_id}", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        with self._cv:
            self._stopping = True
            self._cv.notify()
