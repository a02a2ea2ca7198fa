"""Per-version metadata trees.

Each version of a block is described by a full binary tree over
``adjusted_size`` bytes. Interior nodes hold the keys of their two
children, leaves say which provider holds which page. A write only
creates nodes for the part of the tree it touches; everything else is
shared with older versions by key.

A write's nodes fall into two groups:

* nodes whose range lies entirely inside the written range. Their
  contents depend only on the write itself, so they can be stored as
  soon as the version number is known.
* boundary nodes, the ancestors that straddle the edge of the written
  range. One of their children may be untouched, and its key has to be
  copied from the previous published version, which is only known once
  the versioning manager lets the write complete.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from typing import Optional, Union

from verblob.block import NULL_KEY, BlockDescriptor, ByteRange, node_key, range_to_pages
from verblob.errors import MalformedFrame, MetadataMissing, PrevTreeUnavailable, UnalignedWrite
from verblob.wire import Endpoint, Packer, Unpacker

TAG_INTERIOR = 0
TAG_LEAF = 1


@dataclass(frozen=True)
class PagePlacement:
    page_index: int
    page_id: bytes
    provider_id: int
    endpoint: Endpoint


@dataclass(frozen=True)
class Interior:
    offset: int
    size: int
    left_key: bytes
    right_key: bytes


@dataclass(frozen=True)
class Leaf:
    offset: int
    size: int
    page_id: bytes
    provider_id: int
    endpoint: Endpoint


TreeNode = Union[Interior, Leaf]

# batch lookup: keys in, nodes (or None when absent) out, same order
NodeFetcher = Callable[[Sequence[bytes]], Sequence[Optional[TreeNode]]]


def encode_node(node: TreeNode) -> bytes:
    if isinstance(node, Interior):
        p = Packer().u8(TAG_INTERIOR).u64(node.offset).u64(node.size)
        return p.raw(node.left_key).raw(node.right_key).bytes()
    p = Packer().u8(TAG_LEAF).u64(node.offset).u64(node.size)
    return p.raw(node.page_id).u64(node.provider_id).endpoint(node.endpoint).bytes()


def decode_node(data: bytes) -> TreeNode:
    u = Unpacker(data)
    tag, offset, size = u.u8(), u.u64(), u.u64()
    if tag == TAG_INTERIOR:
        node: TreeNode = Interior(offset, size, u.raw(16), u.raw(16))
    elif tag == TAG_LEAF:
        node = Leaf(offset, size, u.raw(16), u.u64(), u.endpoint())
    else:
        raise MalformedFrame(f"unknown tree node tag {tag}")
    u.done()
    return node


def tree_shape(descriptor: BlockDescriptor) -> list[tuple[int, int]]:
    """All (offset, size) node ranges, root first, level by level."""
    out = []
    size = descriptor.adjusted_size
    while size >= descriptor.page_size:
        out.extend((off, size) for off in range(0, descriptor.adjusted_size, size))
        size //= 2
    return out


@dataclass(frozen=True)
class BoundarySpec:
    """An ancestor of the written range that is not covered by it.

    A child key of ``None`` means that child is untouched by the write and
    its key must come from the previous published tree.
    """

    offset: int
    size: int
    left_key: Optional[bytes]
    right_key: Optional[bytes]

    @property
    def left_range(self) -> tuple[int, int]:
        return self.offset, self.size // 2

    @property
    def right_range(self) -> tuple[int, int]:
        return self.offset + self.size // 2, self.size // 2

    def copied_ranges(self) -> list[tuple[int, int]]:
        out = []
        if self.left_key is None:
            out.append(self.left_range)
        if self.right_key is None:
            out.append(self.right_range)
        return out


@dataclass
class WritePlan:
    descriptor: BlockDescriptor
    range: ByteRange
    version: int
    placements: list[PagePlacement]
    # post-order: children always precede their parent
    stage2_nodes: list[tuple[bytes, TreeNode]] = field(default_factory=list)
    # leaf-to-root order
    stage3_specs: list[BoundarySpec] = field(default_factory=list)

    def key_of(self, offset: int, size: int) -> bytes:
        return node_key(self.descriptor.block_id, offset, size, self.version)


def check_aligned(descriptor: BlockDescriptor, rng: ByteRange) -> None:
    ps = descriptor.page_size
    if rng.offset % ps or rng.size % ps:
        raise UnalignedWrite(f"write ({rng.offset}, {rng.size}) is not aligned to {ps}-byte pages")
    rng.check(descriptor)


def plan_write(
    descriptor: BlockDescriptor,
    rng: ByteRange,
    placements: Iterable[PagePlacement],
    version: int,
) -> WritePlan:
    """Split the nodes of a new version into the stage-2 and stage-3 sets."""
    check_aligned(descriptor, rng)
    if version < 1:
        raise ValueError("writes produce versions >= 1")
    ps = descriptor.page_size
    first, last = range_to_pages(rng, ps)
    by_index = {p.page_index: p for p in placements}
    if sorted(by_index) != list(range(first, last + 1)):
        raise ValueError(f"placements must cover exactly pages {first}..{last}")

    plan = WritePlan(descriptor, rng, version, [by_index[i] for i in range(first, last + 1)])
    block_id = descriptor.block_id

    def build(offset: int, size: int) -> bytes:
        key = node_key(block_id, offset, size, version)
        if size == ps:
            p = by_index[offset // ps]
            node: TreeNode = Leaf(offset, size, p.page_id, p.provider_id, p.endpoint)
        else:
            half = size // 2
            node = Interior(offset, size, build(offset, half), build(offset + half, half))
        plan.stage2_nodes.append((key, node))
        return key

    def visit(offset: int, size: int) -> bytes:
        if rng.contains(offset, size):
            return build(offset, size)
        half = size // 2
        left = visit(offset, half) if rng.overlaps(offset, half) else None
        right = visit(offset + half, half) if rng.overlaps(offset + half, half) else None
        plan.stage3_specs.append(BoundarySpec(offset, size, left, right))
        return node_key(block_id, offset, size, version)

    visit(0, descriptor.adjusted_size)
    return plan


def predecessor_keys(
    plan: WritePlan, predecessor: int, fetch: NodeFetcher
) -> dict[tuple[int, int], bytes]:
    """Keys the predecessor tree holds for every range a boundary node copies.

    Walks the predecessor version top-down along the boundary path, one
    batched fetch per level. Version 0 is the all-NULL tree and needs no
    fetches at all.
    """
    wanted = {r for spec in plan.stage3_specs for r in spec.copied_ranges()}
    if predecessor == 0:
        return dict.fromkeys(wanted, NULL_KEY)
    desc = plan.descriptor
    known = {(0, desc.adjusted_size): desc.root_key(predecessor)}
    levels: dict[int, list[BoundarySpec]] = {}
    for spec in plan.stage3_specs:
        levels.setdefault(spec.size, []).append(spec)

    for size in sorted(levels, reverse=True):
        specs = levels[size]
        keys = [known[(s.offset, s.size)] for s in specs]
        to_fetch = [k for k in keys if k != NULL_KEY]
        fetched = iter(fetch(to_fetch)) if to_fetch else iter(())
        for spec, key in zip(specs, keys):
            if key == NULL_KEY:
                left = right = NULL_KEY
            else:
                node = next(fetched)
                if not isinstance(node, Interior) or (node.offset, node.size) != (spec.offset, spec.size):
                    raise PrevTreeUnavailable(
                        f"version {predecessor} has no interior node at ({spec.offset}, {spec.size})"
                    )
                left, right = node.left_key, node.right_key
            known[spec.left_range] = left
            known[spec.right_range] = right
    return {r: known[r] for r in wanted}


def resolve_boundary(
    plan: WritePlan, previous_key: Callable[[int, int], bytes]
) -> list[tuple[bytes, TreeNode]]:
    """Materialize the boundary nodes, leaf-to-root.

    ``previous_key(offset, size)`` returns the key the predecessor tree
    uses for an untouched child range.
    """
    out = []
    for spec in plan.stage3_specs:
        left = spec.left_key if spec.left_key is not None else previous_key(*spec.left_range)
        right = spec.right_key if spec.right_key is not None else previous_key(*spec.right_range)
        out.append((plan.key_of(spec.offset, spec.size), Interior(spec.offset, spec.size, left, right)))
    return out


def plan_read(
    descriptor: BlockDescriptor, rng: ByteRange, version: int, fetch: NodeFetcher
) -> list[tuple[int, Optional[PagePlacement]]]:
    """Locate every page of ``rng`` in ``version``.

    Descends level by level from the root, pruning subtrees that miss the
    range; each level is one batched fetch. ``None`` in the result means the
    page was never written and reads as zeros.
    """
    rng.check(descriptor)
    ps = descriptor.page_size
    first, last = range_to_pages(rng, ps)
    if version == 0:
        return [(i, None) for i in range(first, last + 1)]

    found: dict[int, Optional[PagePlacement]] = {}
    frontier = [(descriptor.root_key(version), 0, descriptor.adjusted_size)]
    while frontier:
        live = [k for k, _, _ in frontier if k != NULL_KEY]
        nodes = iter(fetch(live)) if live else iter(())
        nxt = []
        for key, offset, size in frontier:
            if key == NULL_KEY:
                lo = max(offset // ps, first)
                hi = min((offset + size) // ps - 1, last)
                for i in range(lo, hi + 1):
                    found[i] = None
                continue
            node = next(nodes)
            if node is None:
                raise MetadataMissing(f"tree node ({offset}, {size}) of version {version} not found")
            if (node.offset, node.size) != (offset, size):
                raise MetadataMissing(f"node at ({offset}, {size}) has range ({node.offset}, {node.size})")
            if isinstance(node, Leaf):
                i = offset // ps
                found[i] = PagePlacement(i, node.page_id, node.provider_id, node.endpoint)
                continue
            half = size // 2
            if rng.overlaps(offset, half):
                nxt.append((node.left_key, offset, half))
            if rng.overlaps(offset + half, half):
                nxt.append((node.right_key, offset + half, half))
        frontier = nxt
    return [(i, found[i]) for i in range(first, last + 1)]
