"""Blocks, pages, byte ranges and metadata node keys.

Everything here is pure arithmetic. A block of ``data_size`` bytes is
backed by a full binary tree over ``adjusted_size`` bytes (the next power
of two), whose leaves are ``page_size`` pages.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from verblob.errors import InvalidGeometry, RangeOutOfBounds

KEY_SIZE = 16
NULL_KEY = bytes(KEY_SIZE)
BLOCK_ID_SIZE = 16
MIN_PAGE_SIZE = 4096
MAX_U64 = (1 << 64) - 1

# block_id | offset | size | version
_KEY_PREIMAGE = struct.Struct(">16sQQQ")


def is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def adjusted_size(data_size: int) -> int:
    """Smallest power of two that is >= ``data_size``."""
    if data_size < 1:
        raise InvalidGeometry(f"data_size must be >= 1, got {data_size}")
    return 1 << (data_size - 1).bit_length()


@dataclass(frozen=True)
class BlockDescriptor:
    block_id: bytes
    page_size: int
    data_size: int
    adjusted_size: int

    def __post_init__(self) -> None:
        if len(self.block_id) != BLOCK_ID_SIZE:
            raise InvalidGeometry("block_id must be 16 bytes")
        if not is_power_of_two(self.page_size) or self.page_size < MIN_PAGE_SIZE:
            raise InvalidGeometry(
                f"page_size must be a power of two >= {MIN_PAGE_SIZE}, got {self.page_size}"
            )
        if self.data_size < self.page_size:
            raise InvalidGeometry(
                f"data_size {self.data_size} is smaller than page_size {self.page_size}"
            )
        if self.data_size > MAX_U64:
            raise InvalidGeometry("data_size does not fit in 64 bits")
        if self.adjusted_size != adjusted_size(self.data_size):
            raise InvalidGeometry("adjusted_size inconsistent with data_size")

    @classmethod
    def create(cls, block_id: bytes, page_size: int, data_size: int) -> BlockDescriptor:
        if data_size < 1:
            raise InvalidGeometry(f"data_size must be >= 1, got {data_size}")
        return cls(block_id, page_size, data_size, adjusted_size(data_size))

    @property
    def leaf_count(self) -> int:
        return self.adjusted_size // self.page_size

    @property
    def depth(self) -> int:
        """Number of tree levels, root and leaves included."""
        return self.leaf_count.bit_length()

    @property
    def page_count(self) -> int:
        """Pages that hold user-visible bytes (the tail beyond data_size excluded)."""
        return -(-self.data_size // self.page_size)

    def root_key(self, version: int) -> bytes:
        return node_key(self.block_id, 0, self.adjusted_size, version)


@dataclass(frozen=True)
class ByteRange:
    offset: int
    size: int

    @property
    def end(self) -> int:
        return self.offset + self.size

    def check(self, descriptor: BlockDescriptor) -> None:
        if self.offset < 0 or self.size < 1 or self.end > descriptor.data_size:
            raise RangeOutOfBounds(
                f"range ({self.offset}, {self.size}) outside block of {descriptor.data_size} bytes"
            )

    def overlaps(self, offset: int, size: int) -> bool:
        return offset < self.end and self.offset < offset + size

    def contains(self, offset: int, size: int) -> bool:
        return self.offset <= offset and offset + size <= self.end


def range_to_pages(rng: ByteRange, page_size: int) -> tuple[int, int]:
    """Inclusive index span of the pages touched by ``rng``."""
    return rng.offset // page_size, (rng.end - 1) // page_size


def node_key(block_id: bytes, offset: int, size: int, version: int) -> bytes:
    """Key of the tree node covering (offset, size) in ``version`` of a block.

    First 16 bytes of SHA-256 over block_id || offset || size || version,
    integers big-endian u64. The all-zero result is remapped so the
    reserved NULL_KEY is never produced.
    """
    digest = hashlib.sha256(_KEY_PREIMAGE.pack(block_id, offset, size, version)).digest()
    key = digest[:KEY_SIZE]
    if key == NULL_KEY:
        key = key[:-1] + b"\x01"
    return key


def key_preimage(block_id: bytes, offset: int, size: int, version: int) -> bytes:
    return _KEY_PREIMAGE.pack(block_id, offset, size, version)
