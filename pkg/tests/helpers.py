"""Independent reference models used as oracles by the tests."""

from __future__ import annotations

from verblob.block import NULL_KEY, node_key


class FlatOracle:
    """Zero-initialized byte buffer that applies writes in publication order.

    Writes are kept as a log and replayed into the requested window, so old
    versions stay readable without storing a full copy per version.
    """

    def __init__(self, size: int) -> None:
        self.size = size
        self.log: list[tuple[int, int, bytes]] = []

    def publish(self, version: int, offset: int, data: bytes) -> None:
        if self.log and version <= self.log[-1][0]:
            raise ValueError("versions must be published in increasing order")
        self.log.append((version, offset, bytes(data)))

    def at(self, version: int, offset: int, size: int) -> bytes:
        buf = bytearray(size)
        end = offset + size
        for v, off, data in self.log:
            if v > version:
                break
            lo, hi = max(off, offset), min(off + len(data), end)
            if lo < hi:
                buf[lo - offset:hi - offset] = data[lo - off:hi - off]
        return bytes(buf)


def all_ranges(adjusted: int, page: int) -> list[tuple[int, int]]:
    out = []
    size = adjusted
    while size >= page:
        out += [(o, size) for o in range(0, adjusted, size)]
        size //= 2
    return out


def brute_force_partition(adjusted: int, page: int, offset: int, size: int):
    """Node ranges a write must create: (inside the range, straddling it)."""
    end = offset + size
    inside, straddle = set(), set()
    for o, s in all_ranges(adjusted, page):
        if o >= offset and o + s <= end:
            inside.add((o, s))
        elif o < end and offset < o + s:
            straddle.add((o, s))
    return inside, straddle


class ReferenceTrees:
    """Which key each version's tree holds for every node range.

    A range touched by write v gets the fresh key for v, any other range
    keeps whatever the previous published version held (NULL for v0).
    """

    def __init__(self, block_id: bytes, adjusted: int, page: int) -> None:
        self.block_id = block_id
        self.ranges = all_ranges(adjusted, page)
        self.keys = {0: dict.fromkeys(self.ranges, NULL_KEY)}

    def apply(self, version: int, predecessor: int, offset: int, size: int) -> None:
        prev = self.keys[predecessor]
        cur = {}
        for o, s in self.ranges:
            touched = o < offset + size and offset < o + s
            cur[(o, s)] = node_key(self.block_id, o, s, version) if touched else prev[(o, s)]
        self.keys[version] = cur

    def key(self, version: int, offset: int, size: int) -> bytes:
        return self.keys[version][(offset, size)]
