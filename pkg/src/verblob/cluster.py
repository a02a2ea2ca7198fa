"""Local deployments of the whole service constellation.

``SimCluster`` wires every service into one :class:`SimNetwork`; it is
what the test suite uses. ``TcpCluster`` starts each service in its own
process listening on loopback, which is what the benchmarks use.
"""

from __future__ import annotations

import json
import math
import multiprocessing as mp
import time
from dataclasses import dataclass
from typing import Optional

from verblob.client import Client, ClientConfig
from verblob.errors import StartupTimeout
from verblob.kv import MetadataProvider
from verblob.manager import LoadReporter, ProviderManager, ProviderManagerClient
from verblob.provider import DEFAULT_CAPACITY, DataProvider, ProviderStats, stats_request
from verblob.transport import SimNetwork, TcpServer, TcpTransport, Transport
from verblob.versioning import IDLE_TIMEOUT, VersioningManager
from verblob.wire import Endpoint

LOOPBACK = "127.0.0.1"


@dataclass
class ClusterLayout:
    """Endpoints of a running constellation; enough to build clients."""

    versioning: Endpoint
    provider_manager: Endpoint
    data_providers: list[Endpoint]
    gateways: list[Endpoint]

    def client_config(self, **kwargs) -> ClientConfig:
        return ClientConfig(self.versioning, self.provider_manager, tuple(self.gateways), **kwargs)

    def to_json(self) -> str:
        return json.dumps({
            "versioning": str(self.versioning),
            "provider_manager": str(self.provider_manager),
            "data_providers": [str(e) for e in self.data_providers],
            "gateways": [str(e) for e in self.gateways],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> ClusterLayout:
        d = json.loads(text)
        return cls(
            Endpoint.parse(d["versioning"]),
            Endpoint.parse(d["provider_manager"]),
            [Endpoint.parse(e) for e in d["data_providers"]],
            [Endpoint.parse(e) for e in d["gateways"]],
        )


class _Cluster:
    layout: ClusterLayout
    transport: Transport

    def client(self, transport: Optional[Transport] = None, **kwargs) -> Client:
        return Client(transport or self.transport, self.layout.client_config(**kwargs))

    def provider_stats(self) -> list[ProviderStats]:
        results = self.transport.call_many([stats_request(ep) for ep in self.layout.data_providers])
        return [ProviderStats.decode(r) for r in results]

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class SimCluster(_Cluster):
    def __init__(
        self,
        data_providers: int = 4,
        metadata_providers: int = 4,
        *,
        capacity: int = DEFAULT_CAPACITY,
        seed: int = 0,
        drop_rate: float = 0.0,
        idle_timeout: float = IDLE_TIMEOUT,
        liveness_window: float = math.inf,
    ) -> None:
        if data_providers < 1 or metadata_providers < 1:
            raise ValueError("need at least one data provider and one metadata provider")
        self.net = SimNetwork(seed, drop_rate=drop_rate)
        self.transport = self.net
        self.vm = VersioningManager(clock=self.net.clock, idle_timeout=idle_timeout, seed=seed)
        self.pm = ProviderManager(clock=self.net.clock, liveness_window=liveness_window)
        vm_ep, pm_ep = Endpoint("vm", 1), Endpoint("pm", 1)
        self.net.serve(vm_ep, self.vm.handle)
        self.net.serve(pm_ep, self.pm.handle)
        self.metadata = []
        gateways = []
        for i in range(metadata_providers):
            ep = Endpoint(f"meta-{i}", 1)
            mp_ = MetadataProvider()
            self.net.serve(ep, mp_.handle)
            self.metadata.append(mp_)
            gateways.append(ep)
        self.providers = []
        dp_eps = []
        pm_client = ProviderManagerClient(self.net, pm_ep)
        for i in range(data_providers):
            ep = Endpoint(f"data-{i}", 1)
            dp = DataProvider(capacity, on_load_change=LoadReporter(pm_client, i + 1))
            self.net.serve(ep, dp.handle)
            pm_client.register(i + 1, ep, capacity)
            self.providers.append(dp)
            dp_eps.append(ep)
        self.layout = ClusterLayout(vm_ep, pm_ep, dp_eps, gateways)


# ---------------------------------------------------------------------------
# multi-process TCP deployment


def _node_main(kind: str, options: dict, conn) -> None:
    """Entry point of one service process."""
    transport = TcpTransport()
    reporter = None
    if kind == "vm":
        service = VersioningManager(idle_timeout=options.get("idle_timeout", IDLE_TIMEOUT))
        service.start_reaper()
        server = TcpServer(Endpoint(LOOPBACK, 0), service.handle, service.blocking_opcodes)
    elif kind == "pm":
        service = ProviderManager()
        server = TcpServer(Endpoint(LOOPBACK, 0), service.handle)
    elif kind == "meta":
        service = MetadataProvider()
        server = TcpServer(Endpoint(LOOPBACK, 0), service.handle)
    elif kind == "data":
        pm_client = ProviderManagerClient(transport, Endpoint.parse(options["pm"]))
        reporter = LoadReporter(pm_client, options["provider_id"])
        service = DataProvider(options["capacity"], on_load_change=reporter)
        server = TcpServer(Endpoint(LOOPBACK, 0), service.handle)
        pm_client.register(options["provider_id"], server.endpoint, options["capacity"])
        reporter.start()
    else:
        raise ValueError(f"unknown node kind {kind!r}")
    conn.send(str(server.endpoint))
    try:
        conn.recv()  # any message (or EOF) means shut down
    except EOFError:
        pass
    if reporter is not None:
        reporter.stop()
    server.close()
    transport.close()


def _mp_context():
    ctx = mp.get_context("forkserver")
    ctx.set_forkserver_preload(["verblob.cluster"])
    return ctx


@dataclass
class _Node:
    kind: str
    process: object
    conn: object
    endpoint: Optional[Endpoint] = None


class TcpCluster(_Cluster):
    def __init__(
        self,
        data_providers: int = 8,
        metadata_providers: int = 8,
        *,
        capacity: int = DEFAULT_CAPACITY,
        idle_timeout: float = IDLE_TIMEOUT,
        startup_timeout: float = 60.0,
    ) -> None:
        if data_providers < 1 or metadata_providers < 1:
            raise ValueError("need at least one data provider and one metadata provider")
        self._ctx = _mp_context()
        self._nodes: list[_Node] = []
        self._deadline = time.monotonic() + startup_timeout
        self.transport = TcpTransport()
        try:
            vm_ep, pm_ep = self._start_many([("vm", {"idle_timeout": idle_timeout}), ("pm", {})])
            gateways = self._start_many([("meta", {})] * metadata_providers)
            dp_eps = self._start_many([
                ("data", {"pm": str(pm_ep), "provider_id": i + 1, "capacity": capacity})
                for i in range(data_providers)
            ])
            self.layout = ClusterLayout(vm_ep, pm_ep, dp_eps, gateways)
            pm = ProviderManagerClient(self.transport, pm_ep)
            while len(pm.list_active(data_providers)) < data_providers:  # pragma: no cover - registration is synchronous
                if time.monotonic() > self._deadline:
                    raise StartupTimeout("data providers did not register in time")
                time.sleep(0.05)
        except BaseException:
            self.close()
            raise

    def _start_many(self, specs: list[tuple[str, dict]]) -> list[Endpoint]:
        started = []
        for kind, options in specs:
            parent, child = self._ctx.Pipe()
            proc = self._ctx.Process(target=_node_main, args=(kind, options, child), daemon=True)
            proc.start()
            child.close()
            node = _Node(kind, proc, parent)
            self._nodes.append(node)
            started.append(node)
        for node in started:
            if not node.conn.poll(max(0.0, self._deadline - time.monotonic())):
                raise StartupTimeout(f"{node.kind} node did not start in time")
            node.endpoint = Endpoint.parse(node.conn.recv())
        return [n.endpoint for n in started]

    def close(self) -> None:
        self.transport.close()
        for node in self._nodes:
            try:
                node.conn.send("stop")
            except (OSError, EOFError, BrokenPipeError):
                pass
        for node in self._nodes:
            node.process.join(timeout=10)
            if node.process.is_alive():
                node.process.terminate()
                node.process.join(timeout=5)
            node.conn.close()
        self._nodes.clear()


def deploy_local(
    data_providers: int,
    metadata_providers: int,
    capacity: int = DEFAULT_CAPACITY,
    *,
    transport: str = "tcp",
    seed: int = 0,
    **kwargs,
) -> _Cluster:
    """Start one versioning manager, one provider manager, ``data_providers``
    data providers and ``metadata_providers`` gateways."""
    if transport == "inproc":
        return SimCluster(data_providers, metadata_providers, capacity=capacity, seed=seed, **kwargs)
    if transport == "tcp":
        return TcpCluster(data_providers, metadata_providers, capacity=capacity, **kwargs)
    raise ValueError(f"unknown transport {transport!r}")
