"""Versioning manager.

Allocates blocks, hands out version numbers and serializes the final
stage of every write through a per-block FIFO queue:

    begin_write        -> ticket appended, pending
    request_completion -> blocks until the ticket is the queue head,
                          then returns the predecessor to reference
    complete_write     -> head dequeued, version becomes the latest
    abort_write        -> ticket dropped, version left as a hole

A head ticket whose holder goes quiet for ``idle_timeout`` seconds is
aborted automatically, so a crashed writer cannot wedge the queue.
"""

from __future__ import annotations

import os
import random
import threading
import time
from collections import deque
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Optional

from verblob.block import BlockDescriptor
from verblob.errors import (
    AbortedTicket,
    InvalidGeometry,
    NotPermitted,
    UnknownBlock,
    UnknownOpcode,
    UnknownTicket,
    VersionNotPublished,
)
from verblob.transport import Transport
from verblob.wire import Endpoint, Opcode, Packer, Unpacker

IDLE_TIMEOUT = 30.0
PENDING = "pending"
PERMITTED = "permitted"


@dataclass
class WriteTicket:
    block_id: bytes
    version: int
    state: str = PENDING
    last_seen: float = 0.0


@dataclass
class _BlockState:
    descriptor: BlockDescriptor
    latest_published: int = 0
    max_assigned: int = 0
    pending: deque = field(default_factory=deque)
    aborted: set = field(default_factory=set)
    head_since: float = 0.0


class VersioningManager:
    def __init__(
        self,
        clock: Callable[[], float] = time.monotonic,
        idle_timeout: float = IDLE_TIMEOUT,
        seed: Optional[int] = None,
    ) -> None:
        self.clock = clock
        self.idle_timeout = idle_timeout
        self._rng = random.Random(seed) if seed is not None else None
        self._blocks: dict[bytes, _BlockState] = {}
        self._busy: set[bytes] = set()
        self._cv = threading.Condition()
        # (kind, block_id, version); kinds: begin grant publish abort auto_abort
        self.events: list[tuple[str, bytes, int]] = []
        self._reaper_stop = threading.Event()

    # -- helpers (caller holds the lock) ---------------------------------

    def _block(self, block_id: bytes) -> _BlockState:
        st = self._blocks.get(block_id)
        if st is None:
            raise UnknownBlock(f"unknown block {block_id.hex()}")
        return st

    def _ticket(self, st: _BlockState, version: int) -> WriteTicket:
        if version in st.aborted:
            raise AbortedTicket(f"version {version} was aborted")
        for t in st.pending:
            if t.version == version:
                return t
        raise UnknownTicket(f"no pending write for version {version}")

    def _drop_head(self, st: _BlockState, now: float) -> None:
        st.pending.popleft()
        st.head_since = now
        if not st.pending:
            self._busy.discard(st.descriptor.block_id)
        self._cv.notify_all()

    def _expire(self, now: float) -> None:
        for block_id in list(self._busy):
            st = self._blocks[block_id]
            while st.pending:
                head = st.pending[0]
                if now - max(st.head_since, head.last_seen) < self.idle_timeout:
                    break
                st.aborted.add(head.version)
                self.events.append(("auto_abort", block_id, head.version))
                self._drop_head(st, now)

    # -- operations ------------------------------------------------------

    def create_block(self, page_size: int, data_size: int) -> BlockDescriptor:
        block_id = self._rng.randbytes(16) if self._rng is not None else os.urandom(16)
        desc = BlockDescriptor.create(block_id, page_size, data_size)
        with self._cv:
            if block_id in self._blocks:
                raise InvalidGeometry("block id collision; retry")
            self._blocks[block_id] = _BlockState(desc)
        return desc

    def latest(self, block_id: bytes, version: Optional[int] = None) -> tuple[int, BlockDescriptor]:
        """Latest published version, or validate an explicit one."""
        with self._cv:
            self._expire(self.clock())
            st = self._block(block_id)
            if version is None:
                return st.latest_published, st.descriptor
            if version == 0 or (version <= st.latest_published and version not in st.aborted):
                return version, st.descriptor
            raise VersionNotPublished(f"version {version} of block {block_id.hex()} is not published")

    def begin_write(self, block_id: bytes) -> int:
        with self._cv:
            now = self.clock()
            self._expire(now)
            st = self._block(block_id)
            st.max_assigned += 1
            v = st.max_assigned
            if not st.pending:
                st.head_since = now
            st.pending.append(WriteTicket(block_id, v, PENDING, now))
            self._busy.add(block_id)
            self.events.append(("begin", block_id, v))
            return v

    def request_completion(self, block_id: bytes, version: int, timeout: Optional[float] = None) -> Optional[int]:
        """Wait until ``version`` heads its queue.

        Returns the latest published version below it, which the write must
        reference for untouched subtrees, or ``None`` if permission was not
        granted within ``timeout`` seconds (``None`` waits forever).
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while True:
                now = self.clock()
                self._expire(now)
                st = self._block(block_id)
                ticket = self._ticket(st, version)
                ticket.last_seen = now
                if st.pending[0] is ticket:
                    if ticket.state != PERMITTED:
                        ticket.state = PERMITTED
                        self.events.append(("grant", block_id, version))
                    return st.latest_published
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                wait = 0.1 if remaining is None else min(remaining, 0.1)
                self._cv.wait(wait)

    def complete_write(self, block_id: bytes, version: int) -> None:
        with self._cv:
            now = self.clock()
            self._expire(now)
            st = self._block(block_id)
            if version <= st.latest_published and version not in st.aborted:
                return  # already published; a retried confirmation
            ticket = self._ticket(st, version)
            if ticket.state != PERMITTED or st.pending[0] is not ticket:
                raise NotPermitted(f"version {version} has not been granted completion")
            st.latest_published = version
            self.events.append(("publish", block_id, version))
            self._drop_head(st, now)

    def abort_write(self, block_id: bytes, version: int) -> None:
        with self._cv:
            now = self.clock()
            self._expire(now)
            st = self._block(block_id)
            if version in st.aborted:
                return
            ticket = self._ticket(st, version)
            st.aborted.add(version)
            self.events.append(("abort", block_id, version))
            if st.pending[0] is ticket:
                self._drop_head(st, now)
            else:
                st.pending.remove(ticket)
                self._cv.notify_all()

    def sweep(self) -> None:
        """Apply the idle timeout now (the reaper thread calls this)."""
        with self._cv:
            self._expire(self.clock())

    def pending_versions(self, block_id: bytes) -> list[int]:
        with self._cv:
            return [t.version for t in self._block(block_id).pending]

    def start_reaper(self, period: float = 1.0) -> None:
        def loop() -> None:
            while not self._reaper_stop.wait(period):
                self.sweep()

        threading.Thread(target=loop, name="vm-reaper", daemon=True).start()

    def stop_reaper(self) -> None:
        self._reaper_stop.set()

    # -- wire ------------------------------------------------------------

    blocking_opcodes = frozenset({Opcode.VM_REQUEST})

    def handle(self, opcode: int, payload: bytes) -> bytes:
        u = Unpacker(payload)
        if opcode == Opcode.VM_CREATE:
            page_size, data_size = u.u64(), u.u64()
            u.done()
            return encode_descriptor(self.create_block(page_size, data_size))
        if opcode == Opcode.VM_LATEST:
            block_id, has_version, v = u.raw(16), u.u8(), u.u64()
            u.done()
            version, desc = self.latest(block_id, v if has_version else None)
            return Packer().u64(version).raw(encode_descriptor(desc)).bytes()
        if opcode == Opcode.VM_BEGIN:
            block_id = u.raw(16)
            u.done()
            return Packer().u64(self.begin_write(block_id)).bytes()
        if opcode == Opcode.VM_REQUEST:
            block_id, v, wait_ms = u.raw(16), u.u64(), u.u32()
            u.done()
            pred = self.request_completion(block_id, v, wait_ms / 1000.0)
            return Packer().u8(pred is not None).u64(pred or 0).bytes()
        if opcode in (Opcode.VM_COMPLETE, Opcode.VM_ABORT):
            block_id, v = u.raw(16), u.u64()
            u.done()
            if opcode == Opcode.VM_COMPLETE:
                self.complete_write(block_id, v)
            else:
                self.abort_write(block_id, v)
            return b""
        raise UnknownOpcode(f"versioning manager does not serve opcode {opcode:#x}")


def encode_descriptor(desc: BlockDescriptor) -> bytes:
    return Packer().raw(desc.block_id).u64(desc.page_size).u64(desc.data_size).u64(desc.adjusted_size).bytes()


def decode_descriptor(u: Unpacker) -> BlockDescriptor:
    return BlockDescriptor(u.raw(16), u.u64(), u.u64(), u.u64())


class VersioningClient:
    """Wire stub with the same method names as the manager."""

    def __init__(self, transport: Transport, endpoint: Endpoint) -> None:
        self.transport = transport
        self.endpoint = endpoint

    def create_block(self, page_size: int, data_size: int) -> BlockDescriptor:
        u = Unpacker(self.transport.call(self.endpoint, Opcode.VM_CREATE, Packer().u64(page_size).u64(data_size).bytes()))
        desc = decode_descriptor(u)
        u.done()
        return desc

    def latest(self, block_id: bytes, version: Optional[int] = None) -> tuple[int, BlockDescriptor]:
        payload = Packer().raw(block_id).u8(version is not None).u64(version or 0).bytes()
        u = Unpacker(self.transport.call(self.endpoint, Opcode.VM_LATEST, payload))
        v, desc = u.u64(), decode_descriptor(u)
        u.done()
        return v, desc

    def begin_write(self, block_id: bytes) -> int:
        u = Unpacker(self.transport.call(self.endpoint, Opcode.VM_BEGIN, Packer().raw(block_id).bytes()))
        v = u.u64()
        u.done()
        return v

    def request_completion(self, block_id: bytes, version: int, wait: float) -> Optional[int]:
        payload = Packer().raw(block_id).u64(version).u32(int(wait * 1000)).bytes()
        u = Unpacker(self.transport.call(self.endpoint, Opcode.VM_REQUEST, payload, timeout=wait + 5.0))
        granted, pred = u.u8(), u.u64()
        u.done()
        return pred if granted else None

    def complete_write(self, block_id: bytes, version: int) -> None:
        self.transport.call(self.endpoint, Opcode.VM_COMPLETE, Packer().raw(block_id).u64(version).bytes())

    def abort_write(self, block_id: bytes, version: int) -> None:
        self.transport.call(self.endpoint, Opcode.VM_ABORT, Packer().raw(block_id).u64(version).bytes())


def check_event_log(events, *, drained: bool = True) -> list[str]:
    """Audit a manager event log; returns human-readable violations.

    Checks, per block: versions are begun in order 1, 2, ...; a version is
    granted only once every lower version has finished; at most one grant
    is open at a time; only granted versions are published, in increasing
    order; each version finishes at most once. With ``drained`` every begun
    version must also have finished.
    """
    problems = []
    begun: dict[bytes, int] = {}
    finished: dict[bytes, set] = {}
    granted: dict[bytes, Optional[int]] = {}
    published: dict[bytes, int] = {}
    for kind, block_id, v in events:
        done = finished.setdefault(block_id, set())
        if kind == "begin":
            if v != begun.get(block_id, 0) + 1:
                problems.append(f"begin {v} out of order")
            begun[block_id] = v
            continue
        if v > begun.get(block_id, 0):
            problems.append(f"{kind} {v} before begin")
        if v in done:
            problems.append(f"{kind} {v} after version already finished")
            continue
        if kind == "grant":
            if granted.get(block_id) is not None:
                problems.append(f"grant {v} while {granted[block_id]} holds the grant")
            missing = [u for u in range(1, v) if u not in done]
            if missing:
                problems.append(f"grant {v} before lower versions {missing[:5]} finished")
            granted[block_id] = v
            continue
        if kind == "publish":
            if granted.get(block_id) != v:
                problems.append(f"publish {v} without holding the grant")
            if v <= published.get(block_id, 0):
                problems.append(f"publish {v} not above {published[block_id]}")
            published[block_id] = v
        elif kind not in ("abort", "auto_abort"):
            problems.append(f"unknown event {kind}")
            continue
        if granted.get(block_id) == v:
            granted[block_id] = None
        done.add(v)
    if drained:
        for block_id, top in begun.items():
            open_ = [u for u in range(1, top + 1) if u not in finished[block_id]]
            if open_:
                problems.append(f"versions {open_[:5]} of {block_id.hex()} never finished")
    return problems
