"""Domain types shared by every container: addressing, messages, work units,
applications, instance sizes and the virtual clock.

All times are integer virtual milliseconds.
"""
from __future__ import annotations

import enum
import hmac
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Optional


class MalformedUri(ValueError):
    pass


class IllegalTransition(RuntimeError):
    pass


class ClockError(RuntimeError):
    pass


# ─── addressing ──────────────────────────────────────────────────────────────

_HOST = r"[A-Za-z0-9](?:[A-Za-z0-9.\-]*[A-Za-z0-9])?"
_PORT = r"[1-9][0-9]{0,4}"
_URI_RE = re.compile(
    rf"^(?P<scheme>[a-z]+)://(?P<host>{_HOST}):(?P<port>{_PORT})"
    rf"/(?P<path>[A-Za-z0-9_.\-]+)"
    rf"(?:\?ie=(?P<ie_host>{_HOST}):(?P<ie_port>{_PORT}))?$"
)
_HOST_RE = re.compile(rf"^{_HOST}$")


def _check_port(port: int) -> int:
    if not 1 <= port <= 65535:
        raise MalformedUri(f"port out of range: {port}")
    return port


@dataclass(frozen=True)
class NodeUri:
    """Address of a container.

    ``internal_endpoint`` is set only for workers that are reachable through
    the message proxy; ``host``/``port`` then name the proxy's balancer.
    """

    host: str
    port: int
    path: str = "Aneka"
    internal_endpoint: Optional[tuple[str, int]] = None
    scheme: str = "tcp"

    def __post_init__(self):
        if self.scheme != "tcp":
            raise MalformedUri(f"unsupported scheme {self.scheme!r}")
        if not _HOST_RE.match(self.host or ""):
            raise MalformedUri(f"bad host {self.host!r}")
        _check_port(self.port)
        if not re.fullmatch(r"[A-Za-z0-9_.\-]+", self.path or ""):
            raise MalformedUri(f"bad path {self.path!r}")
        if self.internal_endpoint is not None:
            ie_host, ie_port = self.internal_endpoint
            if not _HOST_RE.match(ie_host or ""):
                raise MalformedUri(f"bad internal endpoint host {ie_host!r}")
            _check_port(ie_port)

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)

    @property
    def via_proxy(self) -> bool:
        return self.internal_endpoint is not None

    def with_internal_endpoint(self, host: str, port: int) -> "NodeUri":
        return NodeUri(self.host, self.port, self.path, (host, port))

    def __str__(self) -> str:
        return format_node_uri(self)


def parse_node_uri(s: str) -> NodeUri:
    if not s:
        raise MalformedUri("empty uri")
    m = _URI_RE.match(s)
    if m is None:
        raise MalformedUri(f"cannot parse node uri {s!r}")
    if m["scheme"] != "tcp":
        raise MalformedUri(f"unsupported scheme {m['scheme']!r}")
    ie = None
    if m["ie_host"] is not None:
        ie = (m["ie_host"], _check_port(int(m["ie_port"])))
    return NodeUri(m["host"], _check_port(int(m["port"])), m["path"], ie)


def format_node_uri(u: NodeUri) -> str:
    s = f"{u.scheme}://{u.host}:{u.port}/{u.path}"
    if u.internal_endpoint is not None:
        s += f"?ie={u.internal_endpoint[0]}:{u.internal_endpoint[1]}"
    return s


# ─── messages ────────────────────────────────────────────────────────────────

class MessageKind(enum.Enum):
    HEARTBEAT = "Heartbeat"
    SUBMIT_WORK_UNIT = "SubmitWorkUnit"
    WORK_UNIT_RESULT = "WorkUnitResult"
    CONTROL_ACK = "ControlAck"
    FILE_NOTIFICATION = "FileNotification"
    PROXY_NAK = "ProxyNak"
    SUBMIT_APPLICATION = "SubmitApplication"
    ABORT_WORK_UNIT = "AbortWorkUnit"


@dataclass
class Message:
    id: str
    kind: MessageKind
    source: NodeUri
    target: NodeUri
    shared_key: str
    payload: dict = field(default_factory=dict)
    sent_at: Optional[int] = None
    # id of the rejected message, ProxyNak only
    ref_id: Optional[str] = None

    def __post_init__(self):
        if self.target is None:
            raise ValueError("message target must be set")
        if self.kind is MessageKind.PROXY_NAK and not self.ref_id:
            raise ValueError("ProxyNak must carry the rejected message id")


def authenticate(m: Message, key: str) -> bool:
    """True iff the message carries exactly ``key``."""
    if m.shared_key is None or key is None:
        return False
    return hmac.compare_digest(m.shared_key.encode(), key.encode())


# ─── instance sizes ──────────────────────────────────────────────────────────

@dataclass(frozen=True)
class InstanceSize:
    name: str
    cores: int
    # compute units per virtual ms per core
    speed: Fraction
    memory_gb: float

    def duration_ms(self, cost: float) -> int:
        """Execution time of ``cost`` compute units, rounded up to whole ms."""
        rate = self.cores * self.speed
        # floats are read at their shortest decimal form, so 1.6 means 8/5
        exact = Fraction(repr(cost)) if isinstance(cost, float) else Fraction(cost)
        return math.ceil(exact / rate)

    @property
    def throughput(self) -> Fraction:
        return self.cores * self.speed


SMALL = InstanceSize("Small", 1, Fraction(8, 5), 1.75)
MEDIUM = InstanceSize("Medium", 2, Fraction(8, 5), 3.5)
SIZES = {s.name: s for s in (SMALL, MEDIUM)}


# ─── work units and applications ─────────────────────────────────────────────

class Model(enum.Enum):
    TASK = "Task"
    THREAD = "Thread"


class UnitState(enum.Enum):
    QUEUED = "Queued"
    SCHEDULED = "Scheduled"
    RUNNING = "Running"
    COMPLETED = "Completed"
    FAILED = "Failed"
    ABORTED = "Aborted"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_UNIT_STATES


TERMINAL_UNIT_STATES = frozenset({UnitState.COMPLETED, UnitState.FAILED, UnitState.ABORTED})

UNIT_TRANSITIONS: dict[UnitState, frozenset[UnitState]] = {
    UnitState.QUEUED: frozenset({UnitState.SCHEDULED, UnitState.ABORTED}),
    UnitState.SCHEDULED: frozenset({UnitState.RUNNING, UnitState.QUEUED, UnitState.ABORTED}),
    UnitState.RUNNING: frozenset({UnitState.COMPLETED, UnitState.FAILED, UnitState.ABORTED, UnitState.QUEUED}),
    UnitState.COMPLETED: frozenset(),
    UnitState.FAILED: frozenset(),
    UnitState.ABORTED: frozenset(),
}


@dataclass(frozen=True)
class FileEntry:
    name: str
    size: Optional[int] = None
    sha256: Optional[str] = None


@dataclass
class WorkUnit:
    id: str
    app_id: str
    model: Model
    operation: str
    params: dict[str, Any] = field(default_factory=dict)
    cost: float = 0
    state: UnitState = UnitState.QUEUED
    assigned_node: Optional[NodeUri] = None
    submitted_at: Optional[int] = None
    scheduled_at: Optional[int] = None
    started_at: Optional[int] = None
    finished_at: Optional[int] = None
    input_files: list[FileEntry] = field(default_factory=list)
    output_files: list[FileEntry] = field(default_factory=list)
    result: Any = None
    reschedules: int = 0

    def transition(self, new: UnitState, now: int) -> None:
        if new not in UNIT_TRANSITIONS[self.state]:
            raise IllegalTransition(f"{self.id}: {self.state.value} -> {new.value}")
        self.state = new
        if new is UnitState.QUEUED:
            self.assigned_node = None
            self.scheduled_at = self.started_at = None
        elif new is UnitState.SCHEDULED:
            self.scheduled_at = now
        elif new is UnitState.RUNNING:
            self.started_at = now
        else:
            self.finished_at = now

    def spec(self) -> dict:
        """Snapshot sent to a worker; never shares mutable state."""
        return {
            "unit_id": self.id,
            "app_id": self.app_id,
            "model": self.model.value,
            "operation": self.operation,
            "params": dict(self.params),
            "cost": self.cost,
            "input_files": [f.name for f in self.input_files],
            "output_files": [f.name for f in self.output_files],
        }


class AppState(enum.Enum):
    CREATED = "Created"
    SUBMITTED = "Submitted"
    RUNNING = "Running"
    FINISHED = "Finished"
    FAILED = "Failed"


@dataclass
class Application:
    id: str
    user: str
    model: Model
    units: list[WorkUnit] = field(default_factory=list)
    state: AppState = AppState.CREATED
    shared_files: list[FileEntry] = field(default_factory=list)
    deadline: Optional[int] = None

    @property
    def all_terminal(self) -> bool:
        return all(u.state.terminal for u in self.units)

    def settle(self) -> AppState:
        """Recompute the final state once every unit is terminal."""
        if self.units and self.all_terminal:
            if any(u.state is UnitState.FAILED for u in self.units):
                self.state = AppState.FAILED
            else:
                self.state = AppState.FINISHED
        return self.state


# ─── clock ───────────────────────────────────────────────────────────────────

class VirtualClock:
    def __init__(self, now: int = 0):
        self._now = int(now)

    @property
    def now(self) -> int:
        return self._now

    def advance_to(self, t: int) -> None:
        if t < self._now:
            raise ClockError(f"clock cannot move backward ({t} < {self._now})")
        self._now = int(t)
