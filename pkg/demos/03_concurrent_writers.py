# %% [markdown]
# # Concurrent writers and crash recovery
#
# Writers store their pages and inner nodes in parallel, but versions are
# published strictly in order. A writer that dies while holding the head of
# the queue is aborted after an idle timeout so the others can continue.
# The simulated network runs one task at a time in a seeded order, so this
# whole run is reproducible.

# %%
from verblob.cluster import SimCluster
from verblob.versioning import check_event_log

PAGE = 4096
cluster = SimCluster(4, 4, seed=5, idle_timeout=0.5)
block = cluster.client().alloc(PAGE, 32 * PAGE)


def writer(i):
    client = cluster.client(seed=i)
    for k in range(3):
        data = bytes([16 * i + k]) * (2 * PAGE)
        session = client.start_write(block, data, (4 * i + k) * PAGE)
        if i == 2 and k == 1:
            # die after getting permission, without telling anyone
            session.store_pages()
            session.publish_interior()
            session.wait_permission()
            return
        session.run()


for i in range(4):
    cluster.net.spawn(writer, i, name=f"writer-{i}")
cluster.net.run()

# %%
for kind, _, version in cluster.vm.events:
    if kind != "begin":
        print(f"{kind:>10} v{version}")
print("latest:", cluster.client().latest(block))
print("log violations:", check_event_log(cluster.vm.events))
