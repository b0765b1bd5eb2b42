"""Master container: heartbeat membership, FIFO work-unit scheduling with
rescheduling on worker loss, result collection, and instance-hour accounting."""
from __future__ import annotations

import copy
import csv
import enum
import io
import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable, Iterable, Optional

from .core import (
    AppState,
    Application,
    FileEntry,
    InstanceSize,
    MEDIUM,
    Message,
    MessageKind,
    Model,
    NodeUri,
    SIZES,
    UnitState,
    WorkUnit,
    authenticate,
)
from .netsim import Actor, Network
from .storage import Direction, Phase, StorageService, blob_name

log = logging.getLogger(__name__)

HOUR_MS = 3_600_000
DEFAULT_RATES = {"Small": Decimal("1.0"), "Medium": Decimal("2.0")}


class EmptyApplication(ValueError):
    pass


class UnknownUnit(LookupError):
    pass


class StaleResult(RuntimeError):
    pass


class NodeStatus(enum.Enum):
    ONLINE = "Online"
    SUSPECT = "Suspect"
    DEAD = "Dead"


@dataclass
class MembershipEntry:
    node: NodeUri
    size: InstanceSize
    status: NodeStatus = NodeStatus.ONLINE
    last_heartbeat: int = 0
    busy: bool = False
    executed_count: int = 0
    region: str = "cloud"


@dataclass
class SchedulerState:
    ready_queue: deque = field(default_factory=deque)
    # node key -> unit id
    inflight: dict[str, str] = field(default_factory=dict)
    policy: str = "Fifo"


# ─── accounting ──────────────────────────────────────────────────────────────

def billed_hours(start_ms: int, end_ms: int) -> int:
    if end_ms < start_ms:
        raise ValueError("span ends before it starts")
    return math.ceil((end_ms - start_ms) / HOUR_MS)


@dataclass(frozen=True)
class BillingRecord:
    deployment_id: str
    instance_id: str
    size: InstanceSize
    start: int
    end: int
    billed_hours: int
    rate: Decimal
    amount: Decimal
    open: bool = False


class UsageLedger:
    """Instance usage spans; every span is billed per started hour at its size's rate."""

    def __init__(self, rates: Optional[dict[str, Decimal]] = None):
        self.rates = {k: Decimal(str(v)) for k, v in (rates or DEFAULT_RATES).items()}
        self._spans: dict[str, dict] = {}

    def open_span(self, deployment_id: str, instance_id: str, size: InstanceSize, start: int) -> None:
        if instance_id in self._spans:
            raise ValueError(f"span for {instance_id} already exists")
        self._spans[instance_id] = {"deployment_id": deployment_id, "size": size,
                                    "start": start, "end": None}

    def close_span(self, instance_id: str, end: int) -> bool:
        span = self._spans.get(instance_id)
        if span is None or span["end"] is not None:
            return False
        span["end"] = end
        return True

    @property
    def open_spans(self) -> list[str]:
        return [iid for iid, s in self._spans.items() if s["end"] is None]

    def records(self, now: Optional[int] = None) -> list[BillingRecord]:
        """One record per span; open spans are billed up to ``now``."""
        out = []
        for iid, s in self._spans.items():
            is_open = s["end"] is None
            end = s["end"] if not is_open else (now if now is not None else s["start"])
            hours = billed_hours(s["start"], end)
            rate = self.rates[s["size"].name]
            out.append(BillingRecord(s["deployment_id"], iid, s["size"], s["start"], end,
                                     hours, rate, rate * hours, is_open))
        return out

    def total(self, now: Optional[int] = None) -> Decimal:
        return sum((r.amount for r in self.records(now)), Decimal(0))


def billing_csv(records: Iterable[BillingRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["deployment_id", "instance_id", "size", "start_ms", "end_ms", "billed_hours", "amount"])
    for r in records:
        w.writerow([r.deployment_id, r.instance_id, r.size.name, r.start, r.end, r.billed_hours, r.amount])
    return buf.getvalue()


# ─── master container ────────────────────────────────────────────────────────

class Master(Actor):
    def __init__(self, network: Network, shared_key: str, size: InstanceSize = MEDIUM,
                 heartbeat_ms: int = 1000, suspect_intervals: int = 3, dead_intervals: int = 10,
                 max_reschedules: int = 3, ledger: Optional[UsageLedger] = None,
                 storage: Optional[StorageService] = None, data_container: str = "appfiles"):
        super().__init__(network, shared_key)
        self.size = size
        self.heartbeat_ms = heartbeat_ms
        self.suspect_timeout = suspect_intervals * heartbeat_ms
        self.dead_timeout = dead_intervals * heartbeat_ms
        self.max_reschedules = max_reschedules
        self.ledger = ledger or UsageLedger()
        self.storage = storage
        self.data_container = data_container
        self.membership: dict[str, MembershipEntry] = {}
        self.scheduler = SchedulerState()
        self.units: dict[str, WorkUnit] = {}
        self.apps: dict[str, Application] = {}
        self.app_clients: dict[str, NodeUri] = {}
        self.uploaded: set[str] = set()
        self.stale_results = 0
        self.unknown_results = 0
        self.auth_failures = 0
        self.completions: dict[str, int] = {}
        self.dispatch_hooks: list[Callable[["Master"], None]] = []
        self._seq = itertools.count()
        self._unit_seq: dict[str, int] = {}
        self._dispatch_msgs: dict[str, str] = {}
        self._abort_requested: set[str] = set()
        self._in_hook = False
        self._wakeup = None
        self._app_ids = itertools.count(1)
        # nonterminal unit count per application, so settling stays O(1)
        self._open: dict[str, int] = {}

    def start(self) -> None:
        self.after(self.heartbeat_ms, self._sweep_tick)

    def new_app_id(self) -> str:
        return f"app{next(self._app_ids):04d}"

    # ─── inbound ─────────────────────────────────────────────────────────────

    def receive(self, m: Message, sender) -> None:
        if not authenticate(m, self.shared_key):
            self.auth_failures += 1
            log.warning("master dropped %s from %s: bad shared key", m.id, m.source)
            self.network.record("auth_drop", msg=m.id, at=self.id)
            return
        kind = m.kind
        if kind is MessageKind.HEARTBEAT:
            self.on_heartbeat(m)
        elif kind is MessageKind.WORK_UNIT_RESULT:
            try:
                self.on_result(m)
            except (UnknownUnit, StaleResult) as exc:
                log.info("ignored result %s: %s", m.id, exc)
        elif kind is MessageKind.CONTROL_ACK:
            self._on_control(m)
        elif kind is MessageKind.SUBMIT_APPLICATION:
            # the client keeps its own copy; never share mutable state across actors
            app = copy.deepcopy(m.payload["application"])
            try:
                self.submit_application(app, client=m.source)
            except EmptyApplication as exc:
                self.post(MessageKind.CONTROL_ACK, m.source,
                          {"event": "rejected", "app_id": app.id, "error": str(exc)})
        elif kind is MessageKind.ABORT_WORK_UNIT:
            self.on_abort_request(m.payload["unit_id"], m.source)
        elif kind is MessageKind.PROXY_NAK:
            uid = self._dispatch_msgs.get(m.ref_id)
            log.warning("proxy rejected %s (unit %s)", m.ref_id, uid)
            if uid is not None:
                self._take_back(self.units[uid], count=False)
                self.dispatch()

    def on_heartbeat(self, m: Message) -> MembershipEntry:
        key = str(m.source)
        entry = self.membership.get(key)
        if entry is None:
            size = SIZES.get(m.payload.get("size"), self.size)
            entry = MembershipEntry(m.source, size, region=m.payload.get("region", "cloud"))
            self.membership[key] = entry
            self.network.record("member_join", node=key)
        elif entry.status is not NodeStatus.ONLINE:
            self.network.record("member_online", node=key, was=entry.status.value)
        entry.status = NodeStatus.ONLINE
        entry.last_heartbeat = self.now
        entry.busy = key in self.scheduler.inflight
        if not entry.busy and self.scheduler.ready_queue:
            self.dispatch()
        return entry

    # ─── applications ────────────────────────────────────────────────────────

    def submit_application(self, app: Application, client: Optional[NodeUri] = None) -> str:
        if not app.units:
            raise EmptyApplication(f"application {app.id} has no work units")
        if app.model not in (Model.TASK, Model.THREAD):
            raise ValueError(f"unknown model {app.model}")
        existing = self.apps.get(app.id)
        if existing is not None:
            # thread applications grow one unit per started thread
            target = existing
            new_units = [u for u in app.units if u.id not in self.units]
            target.units.extend(new_units)
            if target.state in (AppState.FINISHED, AppState.FAILED):
                target.state = AppState.RUNNING
        else:
            target = app
            new_units = list(app.units)
            self.apps[app.id] = app
            app.state = AppState.SUBMITTED
        if client is not None:
            self.app_clients[app.id] = client
        self._open[app.id] = self._open.get(app.id, 0) + len(new_units)
        for u in new_units:
            u.submitted_at = self.now
            self.units[u.id] = u
            self._unit_seq[u.id] = next(self._seq)
            self.scheduler.ready_queue.append(u.id)
        self.network.record("app_submit", app=app.id, units=len(new_units))
        if client is not None:
            self.post(MessageKind.CONTROL_ACK, client,
                      {"event": "submitted", "app_id": app.id, "units": [u.id for u in new_units]})
        self.dispatch()
        return app.id

    def input_blobs(self, unit: WorkUnit) -> list[str]:
        app = self.apps[unit.app_id]
        names = [blob_name(app.id, "shared", "in", f.name) for f in app.shared_files]
        names += [blob_name(app.id, unit.id, "in", f.name) for f in unit.input_files]
        return names

    def _consume_notices(self) -> None:
        if self.storage is None:
            return
        q = self.storage.queue()
        while True:
            head = q.peek()
            if head is None or head.at > self.now:
                break
            q.get()
            if head.phase is Phase.END and head.direction is Direction.UPLOAD:
                self.uploaded.add(head.file_name)
        head = q.peek()
        if head is not None and (self._wakeup is None or self._wakeup.cancelled
                                 or self._wakeup.due > head.at):
            if self._wakeup is not None:
                self._wakeup.cancel()
            self._wakeup = self.after(head.at - self.now, self.dispatch)

    def _eligible(self, unit: WorkUnit) -> bool:
        app = self.apps[unit.app_id]
        if not unit.input_files and not app.shared_files:
            return True
        return all(b in self.uploaded for b in self.input_blobs(unit))

    # ─── scheduling ──────────────────────────────────────────────────────────

    def idle_workers(self) -> list[str]:
        inflight = self.scheduler.inflight
        return [k for k, e in self.membership.items()
                if e.status is NodeStatus.ONLINE and k not in inflight]

    def dispatch(self) -> list[str]:
        """Pair idle online workers with queued units, FIFO on both sides."""
        self._consume_notices()
        sent = []
        queue = self.scheduler.ready_queue
        for key in self.idle_workers():
            if not queue:
                break
            uid = next((u for u in queue if self._eligible(self.units[u])), None)
            if uid is None:
                break
            queue.remove(uid)
            unit = self.units[uid]
            entry = self.membership[key]
            unit.transition(UnitState.SCHEDULED, self.now)
            unit.assigned_node = entry.node
            self.scheduler.inflight[key] = uid
            entry.busy = True
            receipt = self.post(MessageKind.SUBMIT_WORK_UNIT, entry.node,
                                {"unit": unit.spec(), "input_blobs": self.input_blobs(unit)})
            self._dispatch_msgs[receipt.message_id] = uid
            sent.append(receipt.message_id)
        self._run_hooks()
        return sent

    def _run_hooks(self) -> None:
        if self._in_hook or not self.dispatch_hooks:
            return
        self._in_hook = True
        try:
            for hook in list(self.dispatch_hooks):
                hook(self)
        finally:
            self._in_hook = False

    def _release(self, unit: WorkUnit) -> Optional[MembershipEntry]:
        if unit.assigned_node is None:
            return None
        key = str(unit.assigned_node)
        if self.scheduler.inflight.get(key) == unit.id:
            del self.scheduler.inflight[key]
        entry = self.membership.get(key)
        if entry is not None:
            entry.busy = False
        return entry

    def _take_back(self, unit: WorkUnit, count: bool) -> None:
        """Return an in-flight unit to the head of the ready queue."""
        self._release(unit)
        if unit.id in self._abort_requested:
            self._finalize(unit, UnitState.ABORTED, None)
            return
        unit.transition(UnitState.QUEUED, self.now)
        if count:
            unit.reschedules += 1
        queue = self.scheduler.ready_queue
        seq = self._unit_seq[unit.id]
        i = 0
        while i < len(queue) and self._unit_seq[queue[i]] < seq:
            i += 1
        queue.insert(i, unit.id)
        self.network.record("unit_requeue", unit=unit.id)

    def _on_control(self, m: Message) -> None:
        op = m.payload.get("op")
        unit = self.units.get(m.payload.get("unit_id"))
        if unit is None or unit.assigned_node is None or str(unit.assigned_node) != str(m.source):
            return
        if op == "started" and unit.state is UnitState.SCHEDULED:
            unit.transition(UnitState.RUNNING, self.now)
            app = self.apps[unit.app_id]
            if app.state is AppState.SUBMITTED:
                app.state = AppState.RUNNING
            if app.model is Model.THREAD:
                self._notify_client(app.id, MessageKind.CONTROL_ACK,
                                    {"event": "unit_started", "unit_id": unit.id})
        elif op == "bounced" and unit.state is UnitState.SCHEDULED:
            self._take_back(unit, count=False)
            self.dispatch()

    def on_result(self, m: Message) -> WorkUnit:
        uid = m.payload.get("unit_id")
        unit = self.units.get(uid)
        if unit is None:
            self.unknown_results += 1
            raise UnknownUnit(uid)
        if unit.state.terminal or unit.assigned_node is None or str(unit.assigned_node) != str(m.source):
            self.stale_results += 1
            self.network.record("stale_result", unit=uid, node=str(m.source))
            raise StaleResult(f"{uid} from {m.source}")
        status = m.payload.get("status")
        if unit.state is UnitState.SCHEDULED:
            unit.transition(UnitState.RUNNING, self.now)
        entry = self._release(unit)
        if status == "Completed":
            if entry is not None:
                entry.executed_count += 1
            self._finalize(unit, UnitState.COMPLETED, m.payload.get("result"))
        elif status == "Aborted":
            self._finalize(unit, UnitState.ABORTED, None)
        elif unit.reschedules < self.max_reschedules and unit.id not in self._abort_requested:
            log.info("unit %s failed on %s (%s); rescheduling", uid, m.source, m.payload.get("error"))
            self._take_back(unit, count=True)
        else:
            self._finalize(unit, UnitState.FAILED, m.payload.get("error"))
        self.dispatch()
        return unit

    def _finalize(self, unit: WorkUnit, state: UnitState, result) -> None:
        unit.transition(state, self.now)
        unit.result = result
        self._abort_requested.discard(unit.id)
        if state is UnitState.COMPLETED:
            self.completions[unit.id] = self.completions.get(unit.id, 0) + 1
        self.network.record("unit_done", unit=unit.id, state=state.value,
                            node=str(unit.assigned_node) if unit.assigned_node else None)
        self._notify_client(unit.app_id, MessageKind.WORK_UNIT_RESULT,
                            {"unit_id": unit.id, "status": state.value, "result": result})
        app = self.apps[unit.app_id]
        self._open[app.id] -= 1
        if self._open[app.id]:
            return
        before = app.state
        if app.settle() is not before and app.state in (AppState.FINISHED, AppState.FAILED):
            self.network.record("app_done", app=app.id, state=app.state.value)
            self._notify_client(app.id, MessageKind.CONTROL_ACK,
                                {"event": "application_finished", "app_id": app.id,
                                 "state": app.state.value})

    def _notify_client(self, app_id: str, kind: MessageKind, payload: dict) -> None:
        client = self.app_clients.get(app_id)
        if client is not None:
            self.post(kind, client, payload)

    def on_abort_request(self, unit_id: str, client: Optional[NodeUri] = None) -> None:
        unit = self.units.get(unit_id)
        reject = None
        if unit is None:
            reject = "UnknownUnit"
        elif self.apps[unit.app_id].model is not Model.THREAD:
            reject = "abort is only available to thread applications"
        elif unit.state.terminal:
            reject = "NotRunning"
        if reject:
            if client is not None:
                self.post(MessageKind.CONTROL_ACK, client,
                          {"event": "abort_rejected", "unit_id": unit_id, "reason": reject})
            return
        if unit.state is UnitState.QUEUED:
            self.scheduler.ready_queue.remove(unit.id)
            self._finalize(unit, UnitState.ABORTED, None)
            return
        self._abort_requested.add(unit.id)
        self.post(MessageKind.ABORT_WORK_UNIT, unit.assigned_node, {"unit_id": unit.id})

    # ─── failure detection ───────────────────────────────────────────────────

    def _sweep_tick(self) -> None:
        self.failure_sweep()
        self.after(self.heartbeat_ms, self._sweep_tick)

    def failure_sweep(self) -> list[str]:
        requeued = []
        for key, entry in self.membership.items():
            if entry.status is NodeStatus.DEAD:
                continue
            silent = self.now - entry.last_heartbeat
            if silent > self.dead_timeout:
                requeued += self.mark_dead(key)
            elif silent > self.suspect_timeout and entry.status is NodeStatus.ONLINE:
                entry.status = NodeStatus.SUSPECT
                self.network.record("member_suspect", node=key)
        if requeued:
            self.dispatch()
        return requeued

    def mark_dead(self, key: str) -> list[str]:
        entry = self.membership[key]
        entry.status = NodeStatus.DEAD
        entry.busy = False
        self.network.record("member_dead", node=key)
        uid = self.scheduler.inflight.get(key)
        if uid is None:
            return []
        self._take_back(self.units[uid], count=False)
        return [uid]

    def node_removed(self, node: NodeUri) -> list[str]:
        """The provider stopped this node; forget it and requeue its unit."""
        key = str(node)
        if key not in self.membership or self.membership[key].status is NodeStatus.DEAD:
            return []
        requeued = self.mark_dead(key)
        if requeued:
            self.dispatch()
        return requeued

    # ─── reports ─────────────────────────────────────────────────────────────

    def online_workers(self) -> list[str]:
        return [k for k, e in self.membership.items() if e.status is NodeStatus.ONLINE]

    def is_idle(self, node: NodeUri) -> bool:
        return str(node) not in self.scheduler.inflight

    def remaining_cost(self) -> float:
        return sum(u.cost for u in self.units.values() if not u.state.terminal)

    def accounting_report(self) -> tuple[list[BillingRecord], Decimal]:
        records = self.ledger.records(self.now)
        return records, sum((r.amount for r in records), Decimal(0))

    def status(self) -> dict:
        counts = {s.value: 0 for s in UnitState}
        for u in self.units.values():
            counts[u.state.value] += 1
        return {
            "time": self.now,
            "members": [
                {"node": k, "status": e.status.value, "size": e.size.name, "busy": e.busy,
                 "executed": e.executed_count, "last_heartbeat": e.last_heartbeat}
                for k, e in self.membership.items()
            ],
            "queue": len(self.scheduler.ready_queue),
            "inflight": len(self.scheduler.inflight),
            "units": counts,
            "apps": {a.id: a.state.value for a in self.apps.values()},
            "stale_results": self.stale_results,
        }

    def format_status(self) -> str:
        s = self.status()
        lines = [f"time_ms: {s['time']}", f"queue: {s['queue']}", f"inflight: {s['inflight']}",
                 "units: " + ", ".join(f"{k}={v}" for k, v in s["units"].items() if v),
                 "members:"]
        for m in s["members"]:
            lines.append(f"  {m['node']:<48} {m['status']:<8} {m['size']:<7} "
                         f"busy={str(m['busy']).lower():<5} executed={m['executed']}")
        for app_id, state in s["apps"].items():
            lines.append(f"app {app_id}: {state}")
        return "\n".join(lines)
