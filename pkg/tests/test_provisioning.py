import dataclasses
import itertools
import math
from decimal import Decimal

import pytest
from hypothesis import given
from hypothesis import strategies as st

from paasim.cluster import Cluster, ClusterOptions, default_pool_config
from paasim.core import SMALL
from paasim.master import UsageLedger
from paasim.models import TaskApplicationHandle, task_app_submit
from paasim.netsim import Network
from paasim.provisioning import (
    DEPLOYMENT_TRANSITIONS,
    AlreadyDeployed,
    Algorithm,
    CapacityExceeded,
    DeadlinePassed,
    Deployment,
    DeploymentState,
    InvalidState,
    Op,
    PoolConfig,
    ProvisionRequest,
    ResourcePool,
    ValidationError,
    decide_deadline_priority,
    decide_fixed_queue,
)
from paasim.storage import BlobStore


def pool_cfg(capacity=20):
    return default_pool_config(capacity)


class FakeLauncher:
    def __init__(self):
        self.ids = itertools.count(1)
        self.running = set()
        self.busy = set()

    def start_support(self, dep):
        iid = f"support_{next(self.ids)}"
        self.running.add(iid)
        return [(iid, "master", SMALL)]

    def start_worker(self, dep):
        iid = f"worker_{next(self.ids)}"
        self.running.add(iid)
        return iid, SMALL

    def stop(self, iid):
        self.running.discard(iid)

    def is_idle(self, iid):
        return iid not in self.busy


def make_pool(capacity=20, boot=5000, teardown=0):
    net = Network(seed=1)
    launcher = FakeLauncher()
    ledger = UsageLedger()
    pool = ResourcePool(net, pool_cfg(capacity), ledger, launcher, BlobStore(), boot, teardown)
    return net, pool, launcher, ledger


# ─── policies ────────────────────────────────────────────────────────────────

def test_fixed_queue_examples():
    assert decide_fixed_queue(25, 1, pool_cfg(20), 10).requested == 2
    big = decide_fixed_queue(1000, 1, pool_cfg(16), 10)
    assert big.requested == 15 and big.best_effort
    assert decide_fixed_queue(0, 3, pool_cfg(20)).requested == 0
    assert decide_fixed_queue(5, 5, pool_cfg(20)).requested == 0


def test_deadline_example():
    # 100 units of work, 10 time units left, speed 1 per unit time, 2 workers active
    req = decide_deadline_priority(100, 10, 1, 2, pool_cfg(20), now=0)
    assert req.requested == 8 and req.deadline == 10 and req.algorithm is Algorithm.DEADLINE_PRIORITY


def test_deadline_passed():
    with pytest.raises(DeadlinePassed):
        decide_deadline_priority(100, 10, 1, 2, pool_cfg(), now=10)


def test_bad_inputs():
    with pytest.raises(ValueError):
        decide_fixed_queue(-1, 0, pool_cfg())
    with pytest.raises(ValueError):
        decide_fixed_queue(1, 0, pool_cfg(), threshold=0)
    with pytest.raises(ValueError):
        decide_deadline_priority(1, 10, 0, 0, pool_cfg())
    with pytest.raises(ValueError):
        ProvisionRequest(-1, Algorithm.FIXED_QUEUE)


@given(st.integers(0, 10_000), st.integers(0, 40), st.integers(1, 40), st.integers(1, 50))
def test_fixed_queue_oracle(q, active, cap, threshold):
    cfg = pool_cfg(cap)
    a = decide_fixed_queue(q, active, cfg, threshold)
    assert a == decide_fixed_queue(q, active, cfg, threshold)  # pure
    expect = min(max(math.ceil(q / threshold) - active, 0), max(cap - active, 0))
    assert a.requested == expect
    assert active + a.requested <= max(cap, active)


@given(st.integers(0, 10**6), st.integers(1, 10**5), st.integers(0, 10**5), st.fractions(1, 100),
       st.integers(0, 40), st.integers(1, 40))
def test_deadline_oracle(rc, span, now, speed, active, cap):
    cfg = pool_cfg(cap)
    a = decide_deadline_priority(rc, now + span, speed, active, cfg, now)
    assert a == decide_deadline_priority(rc, now + span, speed, active, cfg, now)
    needed = math.ceil(rc / (speed * span))
    assert a.requested == max(0, min(needed - active, cap - active))
    assert a.best_effort == (needed > cap)


# ─── config ──────────────────────────────────────────────────────────────────

def test_pool_config_validation():
    base = dataclasses.asdict(pool_cfg())
    assert PoolConfig.from_dict(base) == pool_cfg()
    for key, bad in [("capacity", 0), ("capacity", "4"), ("storage_account_key", ""),
                     ("certificate_thumbprint", "xyz")]:
        with pytest.raises(ValidationError) as e:
            PoolConfig.from_dict({**base, key: bad})
        assert e.value.key == key
    with pytest.raises(ValidationError) as e:
        PoolConfig.from_dict({**base, "extra": 1})
    assert e.value.key == "extra"
    missing = dict(base)
    del missing["subscription_id"]
    with pytest.raises(ValidationError) as e:
        PoolConfig.from_dict(missing)
    assert e.value.key == "subscription_id"


# ─── lifecycle ───────────────────────────────────────────────────────────────

@pytest.mark.parametrize("state,op", list(itertools.product(DeploymentState, Op)))
def test_transition_table(state, op):
    dep = Deployment("d", "svc", None)
    dep.state = state
    if (state, op) in DEPLOYMENT_TRANSITIONS:
        assert dep.apply(op) is DEPLOYMENT_TRANSITIONS[(state, op)]
    else:
        with pytest.raises(InvalidState):
            dep.apply(op)
        assert dep.state is state


@given(st.lists(st.sampled_from(list(Op)), max_size=30))
def test_random_op_sequences_stay_in_table(ops):
    dep = Deployment("d", "svc", None)
    for op in ops:
        before = dep.state
        try:
            after = dep.apply(op)
        except InvalidState:
            assert (before, op) not in DEPLOYMENT_TRANSITIONS and dep.state is before
        else:
            assert DEPLOYMENT_TRANSITIONS[(before, op)] is after
    assert [s for _, s, _ in dep.log][:1] in ([], ["NotCreated"])


def test_package_and_create():
    net, pool, launcher, ledger = make_pool()
    ref = pool.package_and_upload()
    assert pool.blobs.exists(ref.container, ref.name)
    dep = pool.create_deployment(ref, 3)
    assert dep.state is DeploymentState.DEPLOYING and not launcher.running
    net.run(5000)
    assert dep.state is DeploymentState.RUNNING and dep.instance_count == 3
    assert len(launcher.running) == 4 and len(ledger.open_spans) == 4
    with pytest.raises(AlreadyDeployed):
        pool.create_deployment(ref, 1)
    with pytest.raises(CapacityExceeded):
        pool.change_instance_count(dep, 21)


def test_create_over_capacity():
    net, pool, *_ = make_pool(capacity=2)
    with pytest.raises(CapacityExceeded):
        pool.create_deployment(pool.package_and_upload(), 3)


def test_scale_out_then_in_newest_idle_first():
    net, pool, launcher, ledger = make_pool()
    dep = pool.create_deployment(pool.package_and_upload(), 5)
    net.run(5000)
    first = {r.instance_id for r in dep.workers}
    pool.change_instance_count(dep, 10)
    assert dep.instance_count == 10 and sum(r.booting for r in dep.workers) == 5
    net.run(net.now + 5000)
    added = {r.instance_id for r in dep.workers} - first
    assert len(added) == 5 and all(i in launcher.running for i in added)
    # one of the new ones is busy: it must survive the scale-in
    busy = sorted(added)[0]
    launcher.busy.add(busy)
    pool.change_instance_count(dep, 5)
    left = {r.instance_id for r in dep.workers}
    assert busy in left and len(left) == 5
    assert len(left & first) == 4
    closed = [r for r in ledger.records(net.now) if not r.open]
    assert len(closed) == 5


def test_scale_in_cancels_pending_boots():
    net, pool, launcher, ledger = make_pool()
    dep = pool.create_deployment(pool.package_and_upload(), 1)
    net.run(5000)
    pool.change_instance_count(dep, 4)
    pool.change_instance_count(dep, 1)
    net.run(net.now + 10_000)
    assert dep.instance_count == 1 and len(launcher.running) == 2
    assert len(ledger.records(net.now)) == 2


def test_suspend_resume_upgrade_delete():
    net, pool, launcher, ledger = make_pool(teardown=300)
    dep = pool.create_deployment(pool.package_and_upload(), 2)
    with pytest.raises(InvalidState):
        pool.change_instance_count(dep, 3)
    net.run(5000)
    pool.upgrade(dep)
    pool.suspend(dep)
    assert dep.state is DeploymentState.SUSPENDED and not launcher.running and not ledger.open_spans
    pool.upgrade(dep)
    with pytest.raises(InvalidState):
        pool.change_instance_count(dep, 3)
    pool.resume(dep)
    net.run(net.now + 5000)
    assert dep.state is DeploymentState.RUNNING and dep.instance_count == 2
    pool.delete_deployment(dep)
    assert dep.state is DeploymentState.DELETING and not launcher.running
    with pytest.raises(InvalidState):
        pool.delete_deployment(dep)
    net.run(net.now + 300)
    assert dep.state is DeploymentState.DELETED
    with pytest.raises(InvalidState):
        pool.delete_deployment(dep)
    # a fresh deployment is allowed once the old one is gone
    assert pool.create_deployment(pool.package_and_upload(), 1).id != dep.id


def test_delete_twice_on_cluster():
    c = Cluster(ClusterOptions())
    c.deploy(2)
    c.delete()
    with pytest.raises(InvalidState):
        c.delete()


def test_cluster_scale_five_ten_five():
    c = Cluster(ClusterOptions())
    c.deploy(5)
    c.scale(10)
    assert len(c.master.online_workers()) == 10
    c.scale(5)
    assert len(c.live_workers()) == 5
    c.run_for(12_000)
    assert len(c.master.online_workers()) == 5


def test_fixed_queue_service_scales_out_and_back():
    c = Cluster(ClusterOptions())
    c.deploy(1)
    svc = c.enable_provisioning(Algorithm.FIXED_QUEUE, 10, baseline=1)
    h = task_app_submit(c.client, [("spin", {"i": i}, 1600) for i in range(1000)])
    h.wait()
    assert c.pool.peak_workers == 16
    assert svc.requests[0].requested == 15
    c.run_for(1000)
    assert c.deployment.instance_count == 1
    assert all(v == 1 for v in c.master.completions.values())


def test_deadline_service_meets_feasible_deadline():
    c = Cluster(ClusterOptions())
    c.deploy(1)
    svc = c.enable_provisioning(Algorithm.DEADLINE_PRIORITY)
    h = TaskApplicationHandle(c.client)
    for i in range(60):
        h.add_task("spin", {"i": i}, 1600)
    h.app.deadline = c.now + 30_000
    h.submit().wait()
    assert svc.requests and svc.requests[0].algorithm is Algorithm.DEADLINE_PRIORITY
    assert h.finished_at <= h.app.deadline


def test_billing_of_a_one_hour_deployment():
    c = Cluster(ClusterOptions())
    c.deploy(5)
    c.run_for(60 * 60_000 - c.now)
    c.delete()
    table, total = c.accounting()
    # five small workers plus the medium master, each within the first hour
    assert total == Decimal("7.0")
    assert len(table.strip().splitlines()) == 7
