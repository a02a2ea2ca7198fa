import pytest

from verblob.errors import DuplicateId, NoProvidersAvailable, UnknownProvider
from verblob.manager import LoadReporter, ProviderManager, ProviderManagerClient
from verblob.transport import SimNetwork
from verblob.wire import Endpoint


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


def ep(i):
    return Endpoint(f"data-{i}", 1)


def test_register_and_list():
    pm = ProviderManager()
    pm.register(1, ep(1), 100)
    [info] = pm.list_active(5)
    assert (info.provider_id, info.endpoint, info.load_bytes, info.capacity_bytes) == (1, ep(1), 0, 100)


def test_duplicate_id():
    pm = ProviderManager()
    pm.register(1, ep(1), 100)
    with pytest.raises(DuplicateId):
        pm.register(1, ep(2), 100)


def test_hundred_providers_capped_by_max_count():
    pm = ProviderManager()
    for i in range(100):
        pm.register(i, ep(i), 100)
    assert len(pm.list_active(1000)) == 100
    assert [p.provider_id for p in pm.list_active(3)] == [0, 1, 2]


def test_heartbeat_updates_load_and_order():
    pm = ProviderManager()
    for i in (1, 2, 3):
        pm.register(i, ep(i), 100)
    pm.heartbeat(1, 50)
    pm.heartbeat(2, 10)
    assert [p.provider_id for p in pm.list_active(3)] == [3, 2, 1]
    # equal loads fall back to the id
    pm.heartbeat(3, 10)
    assert [p.provider_id for p in pm.list_active(3)] == [2, 3, 1]


def test_liveness_window():
    clock = FakeClock()
    pm = ProviderManager(clock, liveness_window=10)
    pm.register(1, ep(1), 100)
    pm.register(2, ep(2), 100)
    clock.now = 8
    pm.heartbeat(2, 0)
    clock.now = 10
    assert len(pm.list_active(5)) == 2
    clock.now = 10.5
    assert [p.provider_id for p in pm.list_active(5)] == [2]
    clock.now = 30
    with pytest.raises(NoProvidersAvailable):
        pm.list_active(5)
    # a heartbeat brings a provider back
    pm.heartbeat(1, 0)
    assert [p.provider_id for p in pm.list_active(5)] == [1]


def test_unknown_provider_heartbeat():
    with pytest.raises(UnknownProvider):
        ProviderManager().heartbeat(7, 0)


def test_empty_manager_has_no_providers():
    with pytest.raises(NoProvidersAvailable):
        ProviderManager().list_active(1)


def test_client_stub_round_trip():
    net = SimNetwork()
    pm = ProviderManager(net.clock)
    net.serve(Endpoint("pm", 1), pm.handle)
    stub = ProviderManagerClient(net, Endpoint("pm", 1))
    stub.register(4, ep(4), 1 << 40)
    stub.heartbeat(4, 123)
    [info] = stub.list_active(2)
    assert (info.provider_id, info.endpoint, info.load_bytes, info.capacity_bytes) == (4, ep(4), 123, 1 << 40)
    with pytest.raises(DuplicateId):
        stub.register(4, ep(4), 1)


def test_load_reporter_throttles():
    sent = []

    class Stub:
        def heartbeat(self, pid, load):
            sent.append((pid, load))

    clock = FakeClock()
    r = LoadReporter(Stub(), 3, min_interval=0.05, clock=clock)
    r(10)
    r(20)
    clock.now = 0.06
    r(30)
    assert sent == [(3, 10), (3, 30)]


def test_started_reporter_pushes_latest_load_in_background():
    import threading

    sent = []
    got = threading.Event()

    class Stub:
        def heartbeat(self, pid, load):
            sent.append(load)
            if load == 30:
                got.set()

    r = LoadReporter(Stub(), 1)
    r.start(period=60)
    try:
        for load in (10, 20, 30):
            r(load)
        assert got.wait(5)
        # bursts may coalesce but the last value always gets through, in order
        assert sent == sorted(sent) and sent[-1] == 30
    finally:
        r.stop()
