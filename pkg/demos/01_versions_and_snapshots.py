# %% [markdown]
# # Versions and snapshots
#
# Every write produces a new version of a block. Old versions never change,
# so any of them can be read back later. Here everything runs in one
# process on the simulated network.

# %%
import numpy as np

from verblob.cluster import SimCluster

cluster = SimCluster(data_providers=4, metadata_providers=4, seed=0)
client = cluster.client(seed=0)

PAGE = 4096
block = client.alloc(PAGE, 64 * PAGE)
print("block", block.hex(), "latest version", client.latest(block))

# %% [markdown]
# A fresh block reads as zeros. Writes must be page aligned.

# %%
assert client.read(block, 0, 8 * PAGE) == bytes(8 * PAGE)

rng = np.random.default_rng(1)
a = rng.bytes(16 * PAGE)
b = rng.bytes(4 * PAGE)
v1 = client.write(block, a, 0)
v2 = client.write(block, b, 8 * PAGE)
print("versions", v1, v2)

# %% [markdown]
# Version 1 still shows only the first write; version 2 shows both. Reads do
# not have to be aligned.

# %%
assert client.read(block, 0, 16 * PAGE, v1) == a
expected = a[:8 * PAGE] + b + a[12 * PAGE:]
assert client.read(block, 0, 16 * PAGE) == expected
padded = expected + bytes(48 * PAGE)
print("unaligned slice ok:", client.read(block, 100, 70000) == padded[100:70100])

# %% [markdown]
# Pages are spread over the data providers by load.

# %%
for i, s in enumerate(cluster.provider_stats()):
    print(f"provider {i + 1}: {s.page_count} pages")
