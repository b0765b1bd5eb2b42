"""Dynamic resource provisioning against the simulated provider.

The resource pool packages and uploads the service, drives the deployment
lifecycle (create, scale, suspend/resume, delete) with boot delays, and keeps
the usage ledger in step with instance lifetimes. Two provisioning policies
decide how many instances to add at each scheduling cycle.
"""
from __future__ import annotations

import enum
import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Optional, Protocol

from .core import InstanceSize, SMALL
from .master import UsageLedger
from .netsim import Network, Timer
from .storage import BlobStore, StorageError, StorageUnavailable

log = logging.getLogger(__name__)

DEFAULT_BOOT_DELAY_MS = 5000
DEFAULT_QUEUE_THRESHOLD = 10


class ProvisioningError(Exception):
    pass


class CapacityExceeded(ProvisioningError):
    pass


class AlreadyDeployed(ProvisioningError):
    pass


class InvalidState(ProvisioningError):
    pass


class DeadlinePassed(ProvisioningError):
    pass


class ValidationError(ValueError):
    def __init__(self, key: str, message: str = ""):
        super().__init__(f"{key}: {message}" if message else key)
        self.key = key


@dataclass(frozen=True)
class PoolConfig:
    capacity: int
    certificate_file_path: str
    certificate_password: str
    certificate_thumbprint: str
    hosted_service_name: str
    subscription_id: str
    storage_account_name: str
    storage_account_key: str
    storage_container: str

    def validate(self) -> "PoolConfig":
        if not isinstance(self.capacity, int) or self.capacity < 1:
            raise ValidationError("capacity", "must be an integer >= 1")
        for f in fields(self):
            if f.name == "capacity":
                continue
            value = getattr(self, f.name)
            if not isinstance(value, str) or not value.strip():
                raise ValidationError(f.name, "must be a nonempty string")
        if not all(c in "0123456789abcdefABCDEF" for c in self.certificate_thumbprint):
            raise ValidationError("certificate_thumbprint", "must be hexadecimal")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "PoolConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(unknown[0], "unknown pool setting")
        missing = sorted(known - set(d))
        if missing:
            raise ValidationError(missing[0], "missing pool setting")
        return cls(**d).validate()


# ─── deployment lifecycle ────────────────────────────────────────────────────

class DeploymentState(enum.Enum):
    NOT_CREATED = "NotCreated"
    DEPLOYING = "Deploying"
    RUNNING = "Running"
    SUSPENDED = "Suspended"
    DELETING = "Deleting"
    DELETED = "Deleted"


class Op(enum.Enum):
    CREATE = "create"
    BOOTED = "booted"
    SUSPEND = "suspend"
    RESUME = "resume"
    SCALE = "scale"
    UPGRADE = "upgrade"
    DELETE = "delete"
    DELETED = "deleted"


_S = DeploymentState
DEPLOYMENT_TRANSITIONS: dict[tuple[DeploymentState, Op], DeploymentState] = {
    (_S.NOT_CREATED, Op.CREATE): _S.DEPLOYING,
    (_S.DEPLOYING, Op.BOOTED): _S.RUNNING,
    (_S.RUNNING, Op.SUSPEND): _S.SUSPENDED,
    (_S.SUSPENDED, Op.RESUME): _S.RUNNING,
    (_S.RUNNING, Op.SCALE): _S.RUNNING,
    (_S.RUNNING, Op.UPGRADE): _S.RUNNING,
    (_S.SUSPENDED, Op.UPGRADE): _S.SUSPENDED,
    (_S.RUNNING, Op.DELETE): _S.DELETING,
    (_S.SUSPENDED, Op.DELETE): _S.DELETING,
    (_S.DELETING, Op.DELETED): _S.DELETED,
}


@dataclass
class InstanceRecord:
    key: str
    role: str
    size: InstanceSize
    requested_at: int
    instance_id: Optional[str] = None
    start: Optional[int] = None
    end: Optional[int] = None
    boot_timer: Optional[Timer] = None

    @property
    def active(self) -> bool:
        return self.end is None

    @property
    def booting(self) -> bool:
        return self.end is None and self.start is None


@dataclass(frozen=True)
class PackageRef:
    container: str
    name: str
    sha256: str


@dataclass
class Deployment:
    id: str
    hosted_service_name: str
    package_ref: Optional[PackageRef] = None
    state: DeploymentState = DeploymentState.NOT_CREATED
    instances: list[InstanceRecord] = field(default_factory=list)
    log: list[tuple[int, str, str]] = field(default_factory=list)
    suspended_count: int = 0

    def apply(self, op: Op, now: int = 0) -> DeploymentState:
        new = DEPLOYMENT_TRANSITIONS.get((self.state, op))
        if new is None:
            raise InvalidState(f"{op.value} not allowed in state {self.state.value}")
        if new is not self.state:
            self.log.append((now, self.state.value, new.value))
        self.state = new
        return new

    @property
    def workers(self) -> list[InstanceRecord]:
        return [r for r in self.instances if r.role == "worker" and r.active]

    @property
    def instance_count(self) -> int:
        return len(self.workers)


class Launcher(Protocol):
    """What the pool needs from whoever assembles containers onto instances."""

    def start_support(self, deployment: Deployment) -> list[tuple[str, str, InstanceSize]]: ...

    def start_worker(self, deployment: Deployment) -> tuple[str, InstanceSize]: ...

    def stop(self, instance_id: str) -> None: ...

    def is_idle(self, instance_id: str) -> bool: ...


class ResourcePool:
    def __init__(self, network: Network, config: PoolConfig, ledger: UsageLedger,
                 launcher: Launcher, blobs: Optional[BlobStore] = None,
                 boot_delay_ms: int = DEFAULT_BOOT_DELAY_MS, teardown_delay_ms: int = 0,
                 worker_size: InstanceSize = SMALL):
        self.network = network
        self.config = config.validate()
        self.ledger = ledger
        self.launcher = launcher
        self.blobs = blobs or BlobStore()
        self.boot_delay_ms = boot_delay_ms
        self.teardown_delay_ms = teardown_delay_ms
        self.worker_size = worker_size
        self.deployments: dict[str, Deployment] = {}
        self.peak_workers = 0
        self._ids = itertools.count(1)
        self._keys = itertools.count(1)

    @property
    def capacity(self) -> int:
        return self.config.capacity

    def _log(self, dep: Deployment, what: str, **extra) -> None:
        self.network.record("deployment", deployment=dep.id, what=what, state=dep.state.value, **extra)

    # ─── packaging ───────────────────────────────────────────────────────────

    def package_and_upload(self) -> PackageRef:
        cfg = self.config
        manifest = {
            "service": cfg.hosted_service_name,
            "subscription": cfg.subscription_id,
            "roles": ["AnekaWorker", "MessageProxy", "AnekaMaster"],
            "files": ["Container.exe", "ServiceDefinition.csdef", "ServiceConfiguration.cscfg"],
        }
        data = json.dumps(manifest, sort_keys=True).encode()
        name = f"{cfg.hosted_service_name}.cspkg"
        try:
            blob = self.blobs.put(cfg.storage_container, name, data, self.network.now, create=True)
        except StorageError as exc:
            raise StorageUnavailable(str(exc)) from exc
        return PackageRef(cfg.storage_container, name, blob.sha256)

    # ─── lifecycle ───────────────────────────────────────────────────────────

    def active_deployment(self) -> Optional[Deployment]:
        for dep in self.deployments.values():
            if dep.state not in (DeploymentState.NOT_CREATED, DeploymentState.DELETED):
                return dep
        return None

    def create_deployment(self, package_ref: PackageRef, count: int) -> Deployment:
        if count < 0:
            raise ValueError("instance count must be >= 0")
        if count > self.capacity:
            raise CapacityExceeded(f"{count} instances requested, capacity {self.capacity}")
        if self.active_deployment() is not None:
            raise AlreadyDeployed(self.config.hosted_service_name)
        dep = Deployment(f"dep{next(self._ids):03d}", self.config.hosted_service_name, package_ref)
        dep.apply(Op.CREATE, self.network.now)
        self.deployments[dep.id] = dep
        self._log(dep, "create", count=count)
        records = [self._new_record("worker", self.worker_size) for _ in range(count)]
        dep.instances.extend(records)
        self._note_peak(dep)
        self.network.schedule(self.boot_delay_ms, lambda: self._boot_all(dep, records))
        return dep

    def _new_record(self, role: str, size: InstanceSize) -> InstanceRecord:
        return InstanceRecord(f"r{next(self._keys):04d}", role, size, self.network.now)

    def _note_peak(self, dep: Deployment) -> None:
        self.peak_workers = max(self.peak_workers, dep.instance_count)

    def _boot_all(self, dep: Deployment, records: list[InstanceRecord]) -> None:
        if dep.state is not DeploymentState.DEPLOYING:
            return
        self._start_support(dep)
        for rec in records:
            if rec.active:
                self._start_worker(dep, rec)
        dep.apply(Op.BOOTED, self.network.now)
        self._log(dep, "running", workers=dep.instance_count)

    def _start_support(self, dep: Deployment) -> None:
        for iid, role, size in self.launcher.start_support(dep):
            rec = self._new_record(role, size)
            rec.instance_id, rec.start = iid, self.network.now
            dep.instances.append(rec)
            self.ledger.open_span(dep.id, iid, size, rec.start)

    def _start_worker(self, dep: Deployment, rec: InstanceRecord) -> None:
        iid, size = self.launcher.start_worker(dep)
        rec.instance_id, rec.start, rec.size, rec.boot_timer = iid, self.network.now, size, None
        self.ledger.open_span(dep.id, iid, size, rec.start)

    def _stop(self, rec: InstanceRecord) -> None:
        now = self.network.now
        if rec.boot_timer is not None:
            rec.boot_timer.cancel()
        rec.end = now
        if rec.instance_id is not None:
            self.launcher.stop(rec.instance_id)
            self.ledger.close_span(rec.instance_id, now)

    def change_instance_count(self, dep: Deployment, new_count: int) -> Deployment:
        if dep.state is not DeploymentState.RUNNING:
            raise InvalidState(f"cannot scale in state {dep.state.value}")
        if new_count > self.capacity:
            raise CapacityExceeded(f"{new_count} instances requested, capacity {self.capacity}")
        if new_count <= 0:
            raise ValueError("instance count must be > 0")
        dep.apply(Op.SCALE, self.network.now)
        current = dep.instance_count
        if new_count > current:
            for _ in range(new_count - current):
                rec = self._new_record("worker", self.worker_size)
                dep.instances.append(rec)
                rec.boot_timer = self.network.schedule(self.boot_delay_ms,
                                                       lambda r=rec: self._boot_one(dep, r))
            self._note_peak(dep)
            self._log(dep, "scale_out", count=new_count)
        elif new_count < current:
            for rec in self.scale_in_victims(dep, current - new_count):
                self._stop(rec)
            self._log(dep, "scale_in", count=new_count)
        return dep

    def _boot_one(self, dep: Deployment, rec: InstanceRecord) -> None:
        if not rec.active or dep.state is not DeploymentState.RUNNING:
            return
        self._start_worker(dep, rec)
        self._log(dep, "instance_up", instance=rec.instance_id)

    def idle_workers(self, dep: Deployment) -> list[InstanceRecord]:
        return [r for r in dep.workers if r.booting or self.launcher.is_idle(r.instance_id)]

    def scale_in_victims(self, dep: Deployment, n: int) -> list[InstanceRecord]:
        """Newest idle instances first; busy ones only once no idle one is left."""
        def newest_first(recs):
            return sorted(recs, key=lambda r: (r.start if r.start is not None else math.inf,
                                               r.requested_at, r.key), reverse=True)
        idle = self.idle_workers(dep)
        busy = [r for r in dep.workers if r not in idle]
        return (newest_first(idle) + newest_first(busy))[:n]

    def suspend(self, dep: Deployment) -> Deployment:
        dep.apply(Op.SUSPEND, self.network.now)
        dep.suspended_count = dep.instance_count
        for rec in [r for r in dep.instances if r.active]:
            self._stop(rec)
        self._log(dep, "suspend")
        return dep

    def resume(self, dep: Deployment, count: Optional[int] = None) -> Deployment:
        if dep.state is not DeploymentState.SUSPENDED:
            raise InvalidState(f"cannot resume in state {dep.state.value}")
        count = dep.suspended_count if count is None else count
        if count > self.capacity:
            raise CapacityExceeded(f"{count} instances requested, capacity {self.capacity}")
        dep.apply(Op.RESUME, self.network.now)
        self._start_support(dep)
        for _ in range(count):
            rec = self._new_record("worker", self.worker_size)
            dep.instances.append(rec)
            rec.boot_timer = self.network.schedule(self.boot_delay_ms,
                                                   lambda r=rec: self._boot_one(dep, r))
        self._log(dep, "resume", count=count)
        return dep

    def upgrade(self, dep: Deployment) -> Deployment:
        # recorded as a state refresh only
        dep.apply(Op.UPGRADE, self.network.now)
        self._log(dep, "upgrade")
        return dep

    def delete_deployment(self, dep: Deployment) -> Deployment:
        dep.apply(Op.DELETE, self.network.now)
        self._log(dep, "delete")
        # workers first so their units are requeued while the master still runs
        for rec in sorted((r for r in dep.instances if r.active), key=lambda r: r.role != "worker"):
            self._stop(rec)
        if self.teardown_delay_ms:
            self.network.schedule(self.teardown_delay_ms, lambda: self._deleted(dep))
        else:
            self._deleted(dep)
        return dep

    def _deleted(self, dep: Deployment) -> None:
        dep.apply(Op.DELETED, self.network.now)
        self._log(dep, "deleted")

    def instance_failed(self, instance_id: str) -> None:
        """An instance died underneath us (fault injection); close its usage span."""
        for dep in self.deployments.values():
            for rec in dep.instances:
                if rec.instance_id == instance_id and rec.active:
                    rec.end = self.network.now
                    self.ledger.close_span(instance_id, rec.end)
                    self._log(dep, "instance_failed", instance=instance_id)
                    return


# ─── provisioning policies ───────────────────────────────────────────────────

class Algorithm(enum.Enum):
    FIXED_QUEUE = "FixedQueue"
    DEADLINE_PRIORITY = "DeadlinePriority"


@dataclass(frozen=True)
class ProvisionRequest:
    requested: int
    algorithm: Algorithm
    deadline: Optional[int] = None
    reason: tuple = ()
    best_effort: bool = False

    def __post_init__(self):
        if self.requested < 0:
            raise ValueError("requested must be >= 0")


def _clamp(needed: int, active: int, capacity: int) -> int:
    return max(0, min(needed - active, capacity - active))


def decide_fixed_queue(queue_len: int, active_workers: int, pool: PoolConfig,
                       threshold: int = DEFAULT_QUEUE_THRESHOLD) -> ProvisionRequest:
    """One worker per ``threshold`` queued units, clamped to the pool's free capacity."""
    if queue_len < 0 or active_workers < 0 or threshold <= 0:
        raise ValueError("parameters must be nonnegative (threshold positive)")
    needed = math.ceil(queue_len / threshold)
    return ProvisionRequest(_clamp(needed, active_workers, pool.capacity), Algorithm.FIXED_QUEUE,
                            reason=(("queue_len", queue_len), ("active", active_workers)),
                            best_effort=needed > pool.capacity)


def decide_deadline_priority(remaining_cost: float, deadline: int, per_worker_speed: float,
                             active_workers: int, pool: PoolConfig, now: int = 0) -> ProvisionRequest:
    """Workers needed to burn ``remaining_cost`` before ``deadline`` at ``per_worker_speed``."""
    if deadline <= now:
        raise DeadlinePassed(f"deadline {deadline} is not after now={now}")
    if remaining_cost < 0 or per_worker_speed <= 0 or active_workers < 0:
        raise ValueError("invalid parameters")
    rate = Fraction(per_worker_speed) * (deadline - now)
    needed = math.ceil(Fraction(remaining_cost) / rate)
    return ProvisionRequest(_clamp(needed, active_workers, pool.capacity),
                            Algorithm.DEADLINE_PRIORITY, deadline=deadline,
                            reason=(("remaining_cost", remaining_cost), ("active", active_workers)),
                            best_effort=needed > pool.capacity)


class ProvisioningService:
    """Hooked into the master's scheduling cycle: scale out on demand, back to
    ``baseline`` once the queue has drained."""

    def __init__(self, pool: ResourcePool, deployment: Deployment,
                 algorithm: Algorithm = Algorithm.FIXED_QUEUE,
                 queue_threshold: int = DEFAULT_QUEUE_THRESHOLD, baseline: int = 1):
        self.pool = pool
        self.deployment = deployment
        self.algorithm = algorithm
        self.queue_threshold = queue_threshold
        self.baseline = baseline
        self.requests: list[ProvisionRequest] = []

    def decide(self, master) -> Optional[ProvisionRequest]:
        queue_len = len(master.scheduler.ready_queue)
        active = self.deployment.instance_count
        if self.algorithm is Algorithm.FIXED_QUEUE:
            return decide_fixed_queue(queue_len, active, self.pool.config, self.queue_threshold)
        deadlines = [a.deadline for a in master.apps.values()
                     if a.deadline is not None and not a.all_terminal]
        if not deadlines:
            return None
        deadline = min(deadlines)
        try:
            return decide_deadline_priority(master.remaining_cost(), deadline,
                                            self.pool.worker_size.throughput, active,
                                            self.pool.config, master.now)
        except DeadlinePassed:
            # late already: grab whatever capacity is left
            return ProvisionRequest(self.pool.capacity - active, Algorithm.DEADLINE_PRIORITY,
                                    deadline=deadline, best_effort=True)

    def __call__(self, master) -> None:
        dep = self.deployment
        if dep.state is not DeploymentState.RUNNING:
            return
        req = self.decide(master)
        active = dep.instance_count
        if req is not None and req.requested > 0:
            self.requests.append(req)
            self.pool.change_instance_count(dep, active + req.requested)
            return
        if master.scheduler.ready_queue:
            return
        surplus = active - self.baseline
        if surplus <= 0:
            return
        idle = len(self.pool.idle_workers(dep))
        n = min(surplus, idle)
        if n > 0:
            self.pool.change_instance_count(dep, active - n)
