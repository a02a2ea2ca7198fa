# %% [markdown]
# # The metadata tree
#
# Each version has a full binary tree over the block. Leaves point at pages,
# inner nodes at their children, and nodes are keyed by
# (block, offset, size, version). A write builds only the nodes its range
# touches and reuses the rest from the previous version.

# %%
from verblob.block import BlockDescriptor, ByteRange
from verblob.tree import PagePlacement, plan_write, tree_shape
from verblob.wire import Endpoint

PAGE = 4096
desc = BlockDescriptor.create(bytes(16), PAGE, 4 * PAGE)
print("4-page block, level order:", [(o // PAGE, s // PAGE) for o, s in tree_shape(desc)])

# %% [markdown]
# Writing pages 1..2 of an 8-page block: nodes fully inside the range are
# built right away, nodes that straddle its edges wait until the previous
# version is known.

# %%
desc = BlockDescriptor.create(bytes(16), PAGE, 8 * PAGE)
placements = [PagePlacement(i, bytes(16), 1, Endpoint("dp", 1)) for i in (1, 2)]
plan = plan_write(desc, ByteRange(PAGE, 2 * PAGE), placements, version=3)
print("built immediately:", sorted((n.offset // PAGE, n.size // PAGE) for _, n in plan.stage2_nodes))
for spec in plan.stage3_specs:
    print(f"boundary ({spec.offset // PAGE}, {spec.size // PAGE}) copies",
          [(o // PAGE, s // PAGE) for o, s in spec.copied_ranges()])
