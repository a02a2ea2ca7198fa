"""Metadata storage: a write-once key-value space split across gateways.

Each metadata provider is a :class:`MetadataProvider` holding its share
of the keys in RAM. Clients go through :class:`KvRing`, which routes every
key to exactly one gateway and batches requests so that all gateways are
contacted in parallel.
"""

from __future__ import annotations

import threading
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Optional

from verblob.block import KEY_SIZE, NULL_KEY
from verblob.errors import (
    GatewayUnreachable,
    KeyConflict,
    StoreError,
    TransportError,
    UnknownOpcode,
    ValueTooLarge,
)
from verblob.transport import Request, Transport
from verblob.wire import Endpoint, Opcode, Packer, Unpacker

MAX_VALUE_SIZE = 64 * 1024


def partition_of(key: bytes, gateway_count: int) -> int:
    """Gateway index for ``key``: first 8 bytes, big-endian, mod the count."""
    if gateway_count < 1:
        raise ValueError("gateway_count must be >= 1")
    return int.from_bytes(key[:8], "big") % gateway_count


def _check_key(key: bytes) -> None:
    if len(key) != KEY_SIZE:
        raise ValueError(f"keys are {KEY_SIZE} bytes, got {len(key)}")
    if key == NULL_KEY:
        raise ValueError("NULL_KEY cannot be stored or fetched")


class MetadataProvider:
    """One gateway's RAM store. Insert-if-absent is atomic per key."""

    def __init__(self) -> None:
        self._data: dict[bytes, bytes] = {}
        self._lock = threading.Lock()

    def put(self, key: bytes, value: bytes) -> None:
        _check_key(key)
        if len(value) > MAX_VALUE_SIZE:
            raise ValueTooLarge(f"value of {len(value)} bytes exceeds {MAX_VALUE_SIZE}")
        value = bytes(value)
        with self._lock:
            old = self._data.setdefault(key, value)
        if old != value:
            raise KeyConflict(f"key {key.hex()} already bound to different bytes")

    def get(self, key: bytes) -> Optional[bytes]:
        _check_key(key)
        return self._data.get(key)

    def __len__(self) -> int:
        return len(self._data)

    def handle(self, opcode: int, payload: bytes) -> bytes:
        u = Unpacker(payload)
        if opcode == Opcode.KV_PUT:
            key, value = u.raw(KEY_SIZE), u.blob()
            u.done()
            self.put(key, value)
            return b""
        if opcode == Opcode.KV_GET:
            key = u.raw(KEY_SIZE)
            u.done()
            value = self.get(key)
            if value is None:
                return Packer().u8(0).bytes()
            return Packer().u8(1).blob(value).bytes()
        raise UnknownOpcode(f"metadata provider does not serve opcode {opcode:#x}")


def put_request(endpoint: Endpoint, key: bytes, value: bytes) -> Request:
    return Request(endpoint, Opcode.KV_PUT, Packer().raw(key).blob(value).bytes())


def get_request(endpoint: Endpoint, key: bytes) -> Request:
    return Request(endpoint, Opcode.KV_GET, Packer().raw(key).bytes())


def parse_get(payload: bytes) -> Optional[bytes]:
    u = Unpacker(payload)
    found = u.u8()
    value = u.blob() if found else None
    u.done()
    return value


@dataclass(frozen=True)
class RingConfig:
    """Static ring membership: ordered (provider_id, endpoint) pairs."""

    gateways: tuple[tuple[int, Endpoint], ...]

    def __post_init__(self) -> None:
        if not self.gateways:
            raise ValueError("a ring needs at least one gateway")

    @classmethod
    def of(cls, endpoints: Sequence[Endpoint]) -> RingConfig:
        return cls(tuple((i, ep) for i, ep in enumerate(endpoints)))

    def gateway_for(self, key: bytes) -> Endpoint:
        return self.gateways[partition_of(key, len(self.gateways))][1]


class KvRing:
    """Client view of the metadata ring."""

    def __init__(self, transport: Transport, config: RingConfig, window: Optional[int] = None) -> None:
        self.transport = transport
        self.config = config
        self.window = window

    def _run(self, requests: list[Request]) -> list:
        results = self.transport.call_many(requests, window=self.window)
        for req, res in zip(requests, results):
            if isinstance(res, TransportError):
                raise GatewayUnreachable(f"gateway {req.endpoint}: {res}") from res
            if isinstance(res, StoreError):
                raise res
        return results

    def put_many(self, items: Sequence[tuple[bytes, bytes]]) -> None:
        for key, value in items:
            _check_key(key)
        self._run([put_request(self.config.gateway_for(k), k, v) for k, v in items])

    def get_many(self, keys: Sequence[bytes]) -> list[Optional[bytes]]:
        for key in keys:
            _check_key(key)
        return [parse_get(p) for p in self._run([get_request(self.config.gateway_for(k), k) for k in keys])]

    def put(self, key: bytes, value: bytes) -> None:
        self.put_many([(key, value)])

    def get(self, key: bytes) -> Optional[bytes]:
        return self.get_many([key])[0]
