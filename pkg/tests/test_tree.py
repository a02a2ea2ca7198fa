import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import ReferenceTrees, brute_force_partition
from verblob.block import NULL_KEY, BlockDescriptor, ByteRange, node_key
from verblob.errors import MalformedFrame, MetadataMissing, PrevTreeUnavailable, RangeOutOfBounds, UnalignedWrite
from verblob.tree import (
    Interior,
    Leaf,
    PagePlacement,
    decode_node,
    encode_node,
    plan_read,
    plan_write,
    predecessor_keys,
    resolve_boundary,
    tree_shape,
)
from verblob.wire import Endpoint

P = 4096
EP = Endpoint("dp", 9)


def desc(pages, data_pages=None, bid=None):
    return BlockDescriptor.create(bid or os.urandom(16), P, (data_pages or pages) * P)


def placements(first, last):
    return [PagePlacement(i, i.to_bytes(16, "big"), 1, EP) for i in range(first, last + 1)]


def plan_pages(d, first, last, version):
    return plan_write(d, ByteRange(first * P, (last - first + 1) * P), placements(first, last), version)


def in_pages(nodes):
    return {(n.offset // P, n.size // P) for n in nodes}


class Store(dict):
    """Node store that counts lookups."""

    fetches = 0

    def fetch(self, keys):
        self.fetches += len(keys)
        return [self.get(k) for k in keys]

    def apply(self, nodes):
        for k, n in nodes:
            assert self.setdefault(k, n) == n


def commit(store, plan, pred):
    store.apply(plan.stage2_nodes)
    keys = predecessor_keys(plan, pred, store.fetch)
    boundary = resolve_boundary(plan, lambda o, s: keys[(o, s)])
    store.apply(boundary)
    return boundary


def test_tree_shape_four_pages():
    d = desc(4)
    assert [(o // P, s // P) for o, s in tree_shape(d)] == [
        (0, 4), (0, 2), (2, 2), (0, 1), (1, 1), (2, 1), (3, 1)
    ]


@pytest.mark.parametrize("pages,count", [(1, 1), (8, 15), (64, 127)])
def test_tree_shape_counts(pages, count):
    shape = tree_shape(desc(pages))
    assert len(shape) == count
    if pages == 1:
        assert shape == [(0, P)]


def test_plan_write_right_half():
    d = desc(4)
    plan = plan_pages(d, 2, 3, 1)
    assert in_pages(n for _, n in plan.stage2_nodes) == {(2, 1), (3, 1), (2, 2)}
    [root] = plan.stage3_specs
    assert (root.offset, root.size) == (0, 4 * P)
    assert root.left_key is None
    assert root.right_key == node_key(d.block_id, 2 * P, 2 * P, 1)
    assert root.copied_ranges() == [(0, 2 * P)]


def test_plan_write_whole_block():
    plan = plan_pages(desc(4), 0, 3, 1)
    assert len(plan.stage2_nodes) == 7
    assert plan.stage3_specs == []


def test_plan_write_middle():
    plan = plan_pages(desc(4), 1, 2, 1)
    assert in_pages(n for _, n in plan.stage2_nodes) == {(1, 1), (2, 1)}
    assert [(s.offset // P, s.size // P) for s in plan.stage3_specs] == [(0, 2), (2, 2), (0, 4)]
    root = plan.stage3_specs[-1]
    # both halves straddle the write, so the root copies nothing
    assert root.copied_ranges() == []


@settings(max_examples=200)
@given(st.integers(0, 6), st.data())
def test_stage_partition_matches_brute_force(log_pages, data):
    pages = 1 << log_pages
    first = data.draw(st.integers(0, pages - 1))
    last = data.draw(st.integers(first, pages - 1))
    plan = plan_pages(desc(pages), first, last, 3)
    inside, straddle = brute_force_partition(pages * P, P, first * P, (last - first + 1) * P)
    got2 = {(n.offset, n.size) for _, n in plan.stage2_nodes}
    got3 = {(s.offset, s.size) for s in plan.stage3_specs}
    assert got2 == inside and got3 == straddle
    assert not got2 & got3


def test_stage2_children_precede_parents():
    plan = plan_pages(desc(16), 3, 12, 1)
    seen = set()
    for key, node in plan.stage2_nodes:
        if isinstance(node, Interior):
            assert node.left_key in seen and node.right_key in seen
        seen.add(key)
    # a boundary node is only resolved after any boundary child below it
    done = set()
    for spec in plan.stage3_specs:
        for child in (spec.left_range, spec.right_range):
            if any(s.offset == child[0] and s.size == child[1] for s in plan.stage3_specs):
                assert child in done
        done.add((spec.offset, spec.size))


def test_each_written_page_has_one_leaf():
    plan = plan_pages(desc(32, 27), 5, 26, 1)
    leaves = [n for _, n in plan.stage2_nodes if isinstance(n, Leaf)]
    assert sorted(n.offset // P for n in leaves) == list(range(5, 27))


def test_plan_write_rejects_unaligned_and_out_of_range():
    d = desc(4, 3)
    with pytest.raises(UnalignedWrite):
        plan_write(d, ByteRange(100, P), [], 1)
    with pytest.raises(UnalignedWrite):
        plan_write(d, ByteRange(0, P + 1), [], 1)
    with pytest.raises(RangeOutOfBounds):
        plan_pages(d, 2, 3, 1)
    with pytest.raises(ValueError):
        plan_write(d, ByteRange(0, 2 * P), placements(0, 0), 1)


def test_resolve_boundary_after_full_write():
    d = desc(4)
    store = Store()
    commit(store, plan_pages(d, 0, 3, 4), 0)
    plan = plan_pages(d, 2, 3, 5)
    boundary = commit(store, plan, 4)
    [(key, root)] = boundary
    assert key == d.root_key(5)
    assert root.left_key == node_key(d.block_id, 0, 2 * P, 4)
    assert root.right_key == node_key(d.block_id, 2 * P, 2 * P, 5)


def test_resolve_boundary_first_write_copies_null():
    d = desc(4)
    [(_, root)] = commit(Store(), plan_pages(d, 2, 3, 1), 0)
    assert root.left_key == NULL_KEY


def test_resolve_boundary_whole_block_is_empty():
    assert commit(Store(), plan_pages(desc(4), 0, 3, 1), 0) == []


def test_predecessor_walk_is_bounded_by_twice_depth():
    d = desc(64)
    store = Store()
    commit(store, plan_pages(d, 0, 63, 1), 0)
    store.fetches = 0
    plan = plan_pages(d, 5, 40, 2)
    predecessor_keys(plan, 1, store.fetch)
    assert 0 < store.fetches <= 2 * d.depth


def test_predecessor_missing_node_raises():
    d = desc(8)
    plan = plan_pages(d, 0, 1, 2)
    with pytest.raises(PrevTreeUnavailable):
        predecessor_keys(plan, 1, lambda keys: [None] * len(keys))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.lists(st.tuples(st.integers(0, 31), st.integers(0, 31)), min_size=1, max_size=6))
def test_sequential_writes_match_reference_trees(log_pages, writes):
    pages = 1 << log_pages
    d = desc(pages)
    ref = ReferenceTrees(d.block_id, d.adjusted_size, P)
    store = Store()
    for v, (a, b) in enumerate(writes, start=1):
        first, last = sorted((a % pages, b % pages))
        commit(store, plan_pages(d, first, last, v), v - 1)
        ref.apply(v, v - 1, first * P, (last - first + 1) * P)
        # every node the version references holds exactly the reference keys
        for o, s in ref.ranges:
            key = ref.key(v, o, s)
            if s > P and key != NULL_KEY:
                node = store[key]
                assert node.left_key == ref.key(v, o, s // 2)
                assert node.right_key == ref.key(v, o + s // 2, s // 2)


def test_plan_read_zero_fills_unwritten_half():
    d = desc(4)
    store = Store()
    commit(store, plan_pages(d, 2, 3, 1), 0)
    got = plan_read(d, ByteRange(0, 4 * P), 1, store.fetch)
    assert [i for i, pl in got if pl is None] == [0, 1]
    assert [pl.page_id for i, pl in got if pl is not None] == [(2).to_bytes(16, "big"), (3).to_bytes(16, "big")]


def test_plan_read_version_zero_needs_no_fetch():
    d = desc(8)
    store = Store()
    assert plan_read(d, ByteRange(3, 5 * P), 0, store.fetch) == [(i, None) for i in range(0, 6)]
    assert store.fetches == 0


def test_plan_read_single_page_touches_depth_nodes():
    d = desc(64)
    store = Store()
    commit(store, plan_pages(d, 0, 63, 1), 0)
    store.fetches = 0
    plan_read(d, ByteRange(P, P), 1, store.fetch)
    assert store.fetches == d.depth == 7


@given(st.integers(0, 63), st.integers(1, 64))
def test_plan_read_fetch_bound(first, k):
    d = desc(64)
    store = Store()
    commit(store, plan_pages(d, 0, 63, 1), 0)
    k = min(k, 64 - first)
    store.fetches = 0
    plan_read(d, ByteRange(first * P, k * P), 1, store.fetch)
    assert store.fetches <= 2 * d.depth + 2 * k


def test_plan_read_missing_node():
    d = desc(4)
    with pytest.raises(MetadataMissing):
        plan_read(d, ByteRange(0, P), 1, lambda keys: [None] * len(keys))


# serialized layout: tag | offset u64 | size u64 | payload
def test_interior_golden_bytes():
    node = Interior(0, 8192, b"\x11" * 16, b"\x22" * 16)
    expected = "00" + "0000000000000000" + "0000000000002000" + "11" * 16 + "22" * 16
    assert encode_node(node).hex() == expected
    assert decode_node(bytes.fromhex(expected)) == node


def test_leaf_golden_bytes():
    node = Leaf(4096, 4096, b"\xab" * 16, 7, Endpoint("h", 80))
    expected = "01" + "0000000000001000" + "0000000000001000" + "ab" * 16 + "0000000000000007" + "0001" + "68" + "0050"
    assert encode_node(node).hex() == expected
    assert decode_node(bytes.fromhex(expected)) == node


@given(st.binary(max_size=80))
def test_decode_node_garbage_raises_cleanly(data):
    try:
        decode_node(data)
    except MalformedFrame:
        pass
