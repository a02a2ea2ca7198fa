"""Data providers: RAM page stores keyed by client-chosen page ids."""

from __future__ import annotations

import threading
from collections.abc import Callable
from dataclasses import dataclass
from typing import Optional

from verblob.errors import CapacityExceeded, PageConflict, UnknownOpcode
from verblob.transport import Request
from verblob.wire import Endpoint, Opcode, Packer, Unpacker

PAGE_ID_SIZE = 16
DEFAULT_CAPACITY = 256 * 1024 * 1024


@dataclass(frozen=True)
class ProviderStats:
    stored_bytes: int
    page_count: int
    capacity_bytes: int

    def encode(self) -> bytes:
        return Packer().u64(self.stored_bytes).u64(self.page_count).u64(self.capacity_bytes).bytes()

    @classmethod
    def decode(cls, payload: bytes) -> ProviderStats:
        u = Unpacker(payload)
        out = cls(u.u64(), u.u64(), u.u64())
        u.done()
        return out


class DataProvider:
    """Holds pages in a dict. Each page id can be bound only once.

    ``on_load_change`` is called with the new stored byte count after every
    accepted store; deployments use it to push fresh load figures to the
    provider manager.
    """

    def __init__(
        self,
        capacity_bytes: int = DEFAULT_CAPACITY,
        on_load_change: Optional[Callable[[int], None]] = None,
    ) -> None:
        self.capacity_bytes = capacity_bytes
        self.on_load_change = on_load_change
        self._pages: dict[bytes, bytes] = {}
        self._stored = 0
        self._lock = threading.Lock()

    def store_page(self, page_id: bytes, payload: bytes) -> None:
        if len(page_id) != PAGE_ID_SIZE:
            raise ValueError("page ids are 16 bytes")
        if not payload:
            raise ValueError("empty page payload")
        payload = bytes(payload)
        with self._lock:
            old = self._pages.get(page_id)
            if old is not None:
                if old != payload:
                    raise PageConflict(f"page {page_id.hex()} already stored with different bytes")
                return
            if self._stored + len(payload) > self.capacity_bytes:
                raise CapacityExceeded(
                    f"storing {len(payload)} bytes would exceed capacity {self.capacity_bytes}"
                )
            self._pages[page_id] = payload
            self._stored += len(payload)
            stored = self._stored
        if self.on_load_change is not None:
            self.on_load_change(stored)

    def fetch_page(self, page_id: bytes) -> Optional[bytes]:
        return self._pages.get(page_id)

    def stats(self) -> ProviderStats:
        with self._lock:
            return ProviderStats(self._stored, len(self._pages), self.capacity_bytes)

    def handle(self, opcode: int, payload: bytes) -> bytes:
        u = Unpacker(payload)
        if opcode == Opcode.PAGE_STORE:
            page_id, data = u.raw(PAGE_ID_SIZE), u.blob()
            u.done()
            self.store_page(page_id, data)
            return b""
        if opcode == Opcode.PAGE_FETCH:
            page_id = u.raw(PAGE_ID_SIZE)
            u.done()
            data = self.fetch_page(page_id)
            return Packer().u8(0).bytes() if data is None else Packer().u8(1).blob(data).bytes()
        if opcode == Opcode.PAGE_STATS:
            u.done()
            return self.stats().encode()
        raise UnknownOpcode(f"data provider does not serve opcode {opcode:#x}")


def store_request(endpoint: Endpoint, page_id: bytes, payload: bytes) -> Request:
    return Request(endpoint, Opcode.PAGE_STORE, Packer().raw(page_id).blob(payload).bytes())


def fetch_request(endpoint: Endpoint, page_id: bytes) -> Request:
    return Request(endpoint, Opcode.PAGE_FETCH, Packer().raw(page_id).bytes())


def stats_request(endpoint: Endpoint) -> Request:
    return Request(endpoint, Opcode.PAGE_STATS)


def parse_fetch(payload: bytes) -> Optional[bytes]:
    u = Unpacker(payload)
    found = u.u8()
    data = u.blob() if found else None
    u.done()
    return data
