# %% [markdown]
# # A loopback deployment and a small benchmark
#
# Each service runs in its own process and talks TCP. The benchmark writes
# a doubling series of segments, reads them back, verifies the bytes, and
# reports how much of each operation went to metadata.

# %%
import sys

from verblob.bench import bench_single, write_csv
from verblob.cluster import TcpCluster

MiB = 1024 * 1024

if __name__ == "__main__":  # service processes are started with forkserver
    with TcpCluster(data_providers=4, metadata_providers=2) as cluster:
        client = cluster.client()
        block = client.alloc(64 * 1024, 64 * MiB)
        client.write(block, b"x" * MiB, 0)
        print("over TCP, latest version", client.latest(block))

    rows = bench_single(data_providers=4, sweep=(1, 4), start_segment=MiB, end_segment=8 * MiB, block_size=64 * MiB)
    write_csv(rows, sys.stdout)
    for r in rows:
        if r.segment_size == 8 * MiB:
            print(f"{r.experiment} m={r.metadata_providers}: metadata share {r.metadata_share:.2f}")
