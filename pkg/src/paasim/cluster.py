"""Assembles a whole platform onto one simulated network.

Two layouts are supported. In a worker deployment the master runs on
premises and every worker sits in the cloud behind a single message proxy.
In a cloud deployment the master runs in the cloud too, clients reach it
through its own input endpoint and workers talk to it over internal
endpoints, so no proxy is needed. The client is on premises in both.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Optional

from .core import MEDIUM, SMALL, InstanceSize, NodeUri, parse_node_uri
from .master import DEFAULT_RATES, Master, UsageLedger, billing_csv
from .models import Client
from .netsim import EndpointKind, EndpointSpec, LatencyProfile, Network
from .provisioning import (
    Algorithm,
    Deployment,
    DeploymentState,
    PoolConfig,
    ProvisioningService,
    ResourcePool,
)
from .proxy import MessageProxy
from .storage import StorageService
from .worker import HEARTBEAT_MS, Worker, WorkloadRegistry, default_registry

log = logging.getLogger(__name__)

DEFAULT_SHARED_KEY = "Qq6dthHKWph0QkS5X7rJL0qLeR14IQfgMexGapTBouijEZzy2XGM3ytK/uldFHQB"
DEFAULT_MASTER_URI = "tcp://localhost:3333/Aneka"
PROXY_PORT = 9090
DEFAULT_HORIZON_MS = 10 ** 10


class Mode(enum.Enum):
    WORKER = "WorkerDeployment"
    CLOUD = "CloudDeployment"

    @classmethod
    def parse(cls, s: str) -> "Mode":
        s = s.lower()
        for m in cls:
            if s in (m.value.lower(), m.name.lower()):
                return m
        raise ValueError(f"unknown deployment mode {s!r}")


def default_pool_config(capacity: int = 16) -> PoolConfig:
    return PoolConfig(
        capacity=capacity,
        certificate_file_path="certs/selfmanagement.pfx",
        certificate_password="changeit",
        certificate_thumbprint="81841B188C32BE42B5256CAED1CE905099785CA9",
        hosted_service_name="anekacloud",
        subscription_id="a22fc8fe-5955-421f-a370-75e3f1246323",
        storage_account_name="anekacloud",
        storage_account_key="eGhauL194C9QA",
        storage_container="packages",
    )


@dataclass
class ClusterOptions:
    mode: Mode = Mode.CLOUD
    seed: int = 0
    lan_ms: int = 1
    wan_ms: int = 100
    shared_key: str = DEFAULT_SHARED_KEY
    master_uri: str = DEFAULT_MASTER_URI
    boot_delay_ms: int = 5000
    teardown_delay_ms: int = 0
    heartbeat_ms: int = HEARTBEAT_MS
    # time the proxy needs to bind its port after its instance boots
    proxy_bind_ms: int = 100
    storage_op_ms: int = 5
    worker_size: InstanceSize = SMALL
    master_size: InstanceSize = MEDIUM
    max_reschedules: int = 3
    rates: dict = field(default_factory=lambda: dict(DEFAULT_RATES))
    trace: bool = True


class Cluster:
    """Owns the network, storage, master, client and resource pool of one scenario.

    Acts as the pool's launcher: it knows how to put a proxy, a master or a
    worker container onto a freshly started instance.
    """

    def __init__(self, options: Optional[ClusterOptions] = None, pool_config: Optional[PoolConfig] = None,
                 registry: Optional[WorkloadRegistry] = None):
        self.options = opts = options or ClusterOptions()
        self.pool_config = pool_config or default_pool_config()
        self.registry = registry or default_registry()
        self.network = net = Network(opts.seed, LatencyProfile(opts.lan_ms, opts.wan_ms), trace=opts.trace)
        cfg = self.pool_config
        self.storage = StorageService(lambda: net.now, {cfg.storage_account_name: cfg.storage_account_key},
                                      op_ms=opts.storage_op_ms,
                                      listener=lambda n: net.record("notice", **n.as_record()))
        self.ledger = UsageLedger(opts.rates)
        self.workers: dict[str, Worker] = {}
        self.proxy: Optional[MessageProxy] = None
        self.deployment: Optional[Deployment] = None
        self.provisioner: Optional[ProvisioningService] = None
        self._declare_roles()

        self.master = Master(net, opts.shared_key, size=opts.master_size, heartbeat_ms=opts.heartbeat_ms,
                             max_reschedules=opts.max_reschedules, ledger=self.ledger, storage=self.storage)
        configured = parse_node_uri(opts.master_uri)
        if opts.mode is Mode.WORKER:
            inst = net.start_instance(self.master_role, "onprem", host=configured.host,
                                      ports={"channel": configured.port})
            self.master.bind(inst, configured)
            self.master.start()
            client_target = configured
        else:
            # clients reach the cloud master through its balanced input endpoint
            client_target = NodeUri(self.master_role.public_host, configured.port, configured.path)

        client_inst = net.start_instance(self.client_role, "onprem", host="client.local")
        self.client = Client(net, opts.shared_key, client_target, self.storage, cfg.storage_account_name)
        self.client.bind(client_inst, NodeUri(client_inst.host, client_inst.ports["reply"]))

        self.pool = ResourcePool(net, cfg, self.ledger, self, self.storage.blobs,
                                 boot_delay_ms=opts.boot_delay_ms,
                                 teardown_delay_ms=opts.teardown_delay_ms, worker_size=opts.worker_size)

    @property
    def mode(self) -> Mode:
        return self.options.mode

    @property
    def now(self) -> int:
        return self.network.now

    def _declare_roles(self) -> None:
        net, opts = self.network, self.options
        hosted = self.pool_config.hosted_service_name
        configured = parse_node_uri(opts.master_uri)
        internal = EndpointSpec("channel", EndpointKind.INTERNAL)
        if opts.mode is Mode.WORKER:
            self.master_role = net.declare_role("AnekaMaster", [internal], public_host=configured.host)
            self.proxy_role = net.declare_role(
                "MessageProxy", [EndpointSpec("proxy-in", EndpointKind.INPUT, PROXY_PORT),
                                 EndpointSpec("control", EndpointKind.INTERNAL)],
                public_host=f"{hosted}.cloudapp.net")
        else:
            self.master_role = net.declare_role(
                "AnekaMaster", [EndpointSpec("client-in", EndpointKind.INPUT, configured.port), internal],
                public_host=f"{hosted}.cloudapp.net")
            self.proxy_role = None
        self.worker_role = net.declare_role("AnekaWorker", [internal])
        self.client_role = net.declare_role("Client", [EndpointSpec("reply", EndpointKind.INTERNAL)],
                                            public_host="client.local")

    # ─── launcher protocol ───────────────────────────────────────────────────

    def start_support(self, deployment: Deployment) -> list[tuple[str, str, InstanceSize]]:
        net, opts = self.network, self.options
        if opts.mode is Mode.WORKER:
            self.proxy = MessageProxy(net, opts.shared_key)
            inst = net.start_instance(self.proxy_role, "cloud")
            self.proxy.bind(inst, NodeUri(self.proxy_role.public_host, PROXY_PORT))
            net.schedule(opts.proxy_bind_ms, self.proxy.mark_ready, owner=inst.id)
            return [(inst.id, "proxy", SMALL)]
        inst = net.start_instance(self.master_role, "cloud")
        self.master.bind(inst, NodeUri(inst.host, inst.ports["channel"]))
        self.master.start()
        return [(inst.id, "master", opts.master_size)]

    def start_worker(self, deployment: Deployment) -> tuple[str, InstanceSize]:
        net, opts = self.network, self.options
        worker = Worker(net, opts.shared_key, self.master.uri, size=opts.worker_size,
                        registry=self.registry, storage=self.storage,
                        storage_account=self.pool_config.storage_account_name,
                        heartbeat_ms=opts.heartbeat_ms, via_proxy=opts.mode is Mode.WORKER)
        inst = net.start_instance(self.worker_role, "cloud")
        host, port = inst.address("channel")
        if opts.mode is Mode.WORKER:
            uri = NodeUri(self.proxy_role.public_host, PROXY_PORT, internal_endpoint=(host, port))
        else:
            uri = NodeUri(host, port)
        worker.bind(inst, uri)
        worker.boot(proxy_ready=self.proxy is not None and self.proxy.ready)
        self.workers[inst.id] = worker
        return inst.id, opts.worker_size

    def add_onprem_worker(self, size: Optional[InstanceSize] = None) -> Worker:
        """A worker on the user's own premises, outside the pool and unbilled.

        It reaches the master the same way the client does.
        """
        net, opts = self.network, self.options
        if "OnPremWorker" not in net.roles:
            net.declare_role("OnPremWorker", [EndpointSpec("channel", EndpointKind.INTERNAL)],
                             public_host="onprem.local")
        inst = net.start_instance("OnPremWorker", "onprem")
        worker = Worker(net, opts.shared_key, self.client.master_uri if opts.mode is Mode.CLOUD
                        else self.master.uri, size=size or opts.worker_size, registry=self.registry,
                        storage=self.storage, storage_account=self.pool_config.storage_account_name,
                        heartbeat_ms=opts.heartbeat_ms)
        worker.bind(inst, NodeUri(*inst.address("channel")))
        worker.boot()
        self.workers[inst.id] = worker
        return worker

    def stop(self, instance_id: str) -> None:
        self.network.stop_instance(instance_id)
        worker = self.workers.get(instance_id)
        if worker is not None:
            self.master.node_removed(worker.uri)

    def is_idle(self, instance_id: str) -> bool:
        worker = self.workers[instance_id]
        return self.master.is_idle(worker.uri) and not worker.busy

    # ─── commands ────────────────────────────────────────────────────────────

    def deploy(self, count: int, wait: bool = True) -> Deployment:
        ref = self.pool.package_and_upload()
        self.deployment = self.pool.create_deployment(ref, count)
        if wait:
            self.wait_ready(count)
        return self.deployment

    def wait_ready(self, count: Optional[int] = None, horizon: Optional[int] = None) -> int:
        """Run until the deployment is up and ``count`` workers are online."""
        dep = self.deployment
        count = dep.instance_count if count is None else count
        return self.network.run_until(
            lambda: dep.state is DeploymentState.RUNNING and len(self.master.online_workers()) >= count,
            self._horizon(horizon))

    def _horizon(self, horizon: Optional[int]) -> int:
        return self.now + DEFAULT_HORIZON_MS if horizon is None else horizon

    def scale(self, count: int, wait: bool = True) -> Deployment:
        self.pool.change_instance_count(self.deployment, count)
        if wait:
            self.network.run_until(lambda: len(self.live_workers()) == count
                                   and len(self.master.online_workers()) >= count,
                                   self._horizon(None))
        return self.deployment

    def delete(self) -> Deployment:
        dep = self.pool.delete_deployment(self.deployment)
        if dep.state is not DeploymentState.DELETED:
            self.network.run_until(lambda: dep.state is DeploymentState.DELETED, self._horizon(None))
        return dep

    def enable_provisioning(self, algorithm: Algorithm = Algorithm.FIXED_QUEUE, queue_threshold: int = 10,
                            baseline: Optional[int] = None) -> ProvisioningService:
        dep = self.deployment
        baseline = dep.instance_count if baseline is None else baseline
        self.provisioner = ProvisioningService(self.pool, dep, algorithm, queue_threshold, baseline)
        self.master.dispatch_hooks.append(self.provisioner)
        return self.provisioner

    def kill_worker(self, instance_id: str) -> None:
        """Crash an instance without telling the master; it must notice by itself."""
        self.network.stop_instance(instance_id)
        self.pool.instance_failed(instance_id)
        self.network.record("chaos_kill", instance=instance_id)

    def live_workers(self) -> list[Worker]:
        return [w for w in self.workers.values() if w.instance.alive]

    def run_until(self, predicate, horizon: Optional[int] = None) -> int:
        return self.network.run_until(predicate, self._horizon(horizon))

    def run_for(self, ms: int) -> int:
        return self.network.run(self.now + ms)

    def status(self) -> str:
        lines = [self.master.format_status()]
        dep = self.deployment
        if dep is not None:
            lines.append(f"deployment {dep.id}: {dep.state.value} workers={dep.instance_count}")
        return "\n".join(lines)

    def accounting(self) -> tuple[str, Decimal]:
        records = self.ledger.records(self.now)
        return billing_csv(records), sum((r.amount for r in records), Decimal(0))
