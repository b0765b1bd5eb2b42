"""Deterministic discrete-event network.

Instances of declared roles exchange :class:`~paasim.core.Message` objects.
Input endpoints sit behind a strict round-robin balancer; internal endpoints
are addressed directly. Delivery latency depends only on whether sender and
receiver carry the same region label.
"""
from __future__ import annotations

import enum
import hashlib
import heapq
import itertools
import json
import logging
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .core import Message, MessageKind, NodeUri, VirtualClock

log = logging.getLogger(__name__)

MAX_ENDPOINTS = 5
PORT_RANGE = (20000, 65000)


class EndpointLimitExceeded(ValueError):
    pass


class Unroutable(LookupError):
    pass


class EmptyBackendSet(LookupError):
    pass


class HorizonExceeded(RuntimeError):
    pass


class UnknownRole(LookupError):
    pass


class EndpointKind(enum.Enum):
    INPUT = "Input"
    INTERNAL = "Internal"


class Via(enum.Enum):
    INPUT_ENDPOINT = "InputEndpoint"
    DIRECT = "Direct"


@dataclass(frozen=True)
class EndpointSpec:
    name: str
    kind: EndpointKind
    # balancer port for input endpoints; instances get their own ports
    port: Optional[int] = None
    protocol: str = "TCP"


@dataclass(frozen=True)
class LatencyProfile:
    lan_ms: int = 1
    wan_ms: int = 100

    def __post_init__(self):
        if self.lan_ms < 0 or self.wan_ms < 0:
            raise ValueError("latencies must be nonnegative")
        if self.lan_ms > self.wan_ms:
            raise ValueError("lan_ms must not exceed wan_ms")

    def between(self, region_a: str, region_b: str) -> int:
        return self.lan_ms if region_a == region_b else self.wan_ms


ZERO_LATENCY = LatencyProfile(0, 0)


@dataclass
class LoadBalancer:
    input_port: int
    backends: list[str] = field(default_factory=list)
    cursor: int = 0

    def pick(self) -> str:
        if not self.backends:
            raise EmptyBackendSet(f"no backends behind port {self.input_port}")
        backend = self.backends[self.cursor]
        self.cursor = (self.cursor + 1) % len(self.backends)
        return backend

    def add(self, instance_id: str) -> None:
        self.backends.append(instance_id)

    def remove(self, instance_id: str) -> None:
        i = self.backends.index(instance_id)
        del self.backends[i]
        if i < self.cursor:
            self.cursor -= 1
        if not self.backends or self.cursor >= len(self.backends):
            self.cursor = 0


@dataclass
class Role:
    name: str
    endpoints: tuple[EndpointSpec, ...]
    public_host: str
    balancers: dict[str, LoadBalancer] = field(default_factory=dict)
    instances: list[str] = field(default_factory=list)

    def input_address(self, endpoint: str) -> tuple[str, int]:
        return (self.public_host, self.balancers[endpoint].input_port)


@dataclass
class Instance:
    id: str
    role: Role
    region: str
    host: str
    ports: dict[str, int]
    actor: Any = None
    alive: bool = True
    started_at: int = 0
    stopped_at: Optional[int] = None

    def address(self, endpoint: Optional[str] = None) -> tuple[str, int]:
        if endpoint is None:
            endpoint = next(iter(self.ports))
        return (self.host, self.ports[endpoint])


@dataclass
class Receipt:
    message_id: str
    destination: str
    due: int


class Timer:
    __slots__ = ("due", "callback", "owner", "cancelled")

    def __init__(self, due: int, callback: Callable[[], None], owner: Optional[str]):
        self.due = due
        self.callback = callback
        self.owner = owner
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Network:
    """Event loop, address book and balancers for one simulated scenario."""

    def __init__(self, seed: int = 0, latency: LatencyProfile = LatencyProfile(),
                 horizon: Optional[int] = None, trace: bool = True):
        self.seed = seed
        self.latency = latency
        self.horizon = horizon
        self.clock = VirtualClock()
        self.rng = random.Random(seed)
        self.roles: dict[str, Role] = {}
        self.instances: dict[str, Instance] = {}
        self._addresses: dict[tuple[str, int], str] = {}
        self._balancers: dict[tuple[str, int], LoadBalancer] = {}
        self._used_ports: set[int] = set()
        self._queue: list = []
        self._seq = itertools.count()
        self._ids = itertools.count(1)
        self._instance_ids = itertools.count()
        self._subscribers: dict[str, list[Callable[[dict], None]]] = {}
        self._trace_enabled = trace
        self.trace: list[str] = []
        self.events_processed = 0

    @property
    def now(self) -> int:
        return self.clock.now

    # ─── topology ────────────────────────────────────────────────────────────

    def declare_role(self, role_name: str, endpoints=(), public_host: Optional[str] = None) -> Role:
        endpoints = tuple(endpoints)
        if len(endpoints) > MAX_ENDPOINTS:
            raise EndpointLimitExceeded(
                f"role {role_name!r} declares {len(endpoints)} endpoints (max {MAX_ENDPOINTS})")
        if role_name in self.roles:
            raise ValueError(f"role {role_name!r} already declared")
        if len({e.name for e in endpoints}) != len(endpoints):
            raise ValueError("endpoint names must be unique within a role")
        public_host = public_host or f"{role_name.lower()}.cloudapp.net"
        role = Role(role_name, endpoints, public_host)
        for ep in endpoints:
            if ep.kind is EndpointKind.INPUT:
                if ep.port is None:
                    raise ValueError(f"input endpoint {ep.name!r} needs a balancer port")
                lb = LoadBalancer(ep.port)
                role.balancers[ep.name] = lb
                self._balancers[(public_host, ep.port)] = lb
        self.roles[role_name] = role
        self.record("role", role=role_name, endpoints=[e.name for e in endpoints])
        return role

    def _fresh_port(self) -> int:
        lo, hi = PORT_RANGE
        while True:
            port = self.rng.randint(lo, hi)
            if port not in self._used_ports:
                self._used_ports.add(port)
                return port

    def start_instance(self, role: Role | str, region: str = "cloud", actor: Any = None,
                       host: Optional[str] = None, ports: Optional[dict[str, int]] = None) -> Instance:
        """Start an instance and register it behind its role's balancers.

        Ports come from the seeded generator unless ``ports`` pins them, which
        only the on-premises master uses. Callers read ``instance.ports``
        before binding.
        """
        if isinstance(role, str):
            if role not in self.roles:
                raise UnknownRole(role)
            role = self.roles[role]
        elif self.roles.get(role.name) is not role:
            raise UnknownRole(role.name)
        n = next(self._instance_ids)
        iid = f"{role.name}_IN_{len(role.instances)}"
        if host is None:
            host = f"10.0.{n // 250}.{n % 250 + 4}"
        assigned = {}
        for ep in role.endpoints:
            if ports and ep.name in ports:
                assigned[ep.name] = ports[ep.name]
                self._used_ports.add(ports[ep.name])
            else:
                assigned[ep.name] = self._fresh_port()
        if not role.endpoints:
            # outbound-only role still needs an address to receive replies on
            assigned["_reply"] = (ports or {}).get("_reply") or self._fresh_port()
        inst = Instance(iid, role, region, host, assigned, actor, started_at=self.now)
        for port in assigned.values():
            if (host, port) in self._addresses:
                raise ValueError(f"address {host}:{port} already bound")
            self._addresses[(host, port)] = iid
        for ep_name, lb in role.balancers.items():
            lb.add(iid)
        role.instances.append(iid)
        self.instances[iid] = inst
        self.record("instance_start", instance=iid, region=region, host=host,
                    ports=sorted(assigned.values()))
        return inst

    def attach(self, instance_id: str, actor: Any) -> None:
        self.instances[instance_id].actor = actor

    def stop_instance(self, instance_id: str) -> None:
        inst = self.instances[instance_id]
        if not inst.alive:
            return
        inst.alive = False
        inst.stopped_at = self.now
        for lb in inst.role.balancers.values():
            lb.remove(instance_id)
        self.record("instance_stop", instance=instance_id)

    def resolve(self, address: tuple[str, int]) -> Instance:
        iid = self._addresses.get(tuple(address))
        if iid is None:
            raise Unroutable(f"no endpoint at {address[0]}:{address[1]}")
        return self.instances[iid]

    def is_balancer(self, address: tuple[str, int]) -> bool:
        return tuple(address) in self._balancers

    def balancer(self, address: tuple[str, int]) -> LoadBalancer:
        lb = self._balancers.get(tuple(address))
        if lb is None:
            raise Unroutable(f"no input endpoint at {address[0]}:{address[1]}")
        return lb

    # ─── messaging ───────────────────────────────────────────────────────────

    def next_message_id(self) -> str:
        return f"m{next(self._ids):07d}"

    def message(self, kind: MessageKind, source: NodeUri, target: NodeUri, shared_key: str,
                payload: Optional[dict] = None, ref_id: Optional[str] = None) -> Message:
        return Message(self.next_message_id(), kind, source, target, shared_key,
                       payload or {}, ref_id=ref_id)

    def send(self, m: Message, via: Via = Via.DIRECT, sender: Optional[str] = None,
             to: Optional[tuple[str, int]] = None) -> Receipt:
        """Queue ``m`` for delivery.

        ``InputEndpoint`` hands the message to whichever backend the target's
        balancer picks next. ``Direct`` delivers to ``to`` (default: the
        target's own host/port).
        """
        if via is Via.INPUT_ENDPOINT:
            lb = self.balancer(to or m.target.address)
            dest = self.instances[lb.pick()]
        else:
            dest = self.resolve(to or m.target.address)
        src = self.instances[sender] if sender is not None else None
        src_region = src.region if src is not None else dest.region
        due = self.now + self.latency.between(src_region, dest.region)
        if m.sent_at is None:
            m.sent_at = self.now
        self.record("send", msg=m.id, msg_kind=m.kind.value, src=sender, dst=dest.id,
                    via=via.value, due=due)
        self._push(due, ("deliver", dest.id, m, sender, via))
        return Receipt(m.id, dest.id, due)

    def schedule(self, delay: int, callback: Callable[[], None], owner: Optional[str] = None) -> Timer:
        if delay < 0:
            raise ValueError("negative delay")
        t = Timer(self.now + int(delay), callback, owner)
        self._push(t.due, ("timer", t))
        return t

    def _push(self, due: int, event) -> None:
        heapq.heappush(self._queue, (due, next(self._seq), event))

    # ─── pub/sub for fabric-level notifications (e.g. proxy ready) ───────────

    def subscribe(self, topic: str, callback: Callable[[dict], None]) -> None:
        self._subscribers.setdefault(topic, []).append(callback)

    def publish(self, topic: str, **data) -> None:
        self.record("publish", topic=topic, **data)
        for cb in list(self._subscribers.get(topic, ())):
            cb(data)

    # ─── loop ────────────────────────────────────────────────────────────────

    @property
    def pending(self) -> int:
        return len(self._queue)

    def peek_time(self) -> Optional[int]:
        return self._queue[0][0] if self._queue else None

    def step(self) -> bool:
        if not self._queue:
            return False
        due, _, event = heapq.heappop(self._queue)
        self.clock.advance_to(due)
        self.events_processed += 1
        if event[0] == "timer":
            timer = event[1]
            if timer.cancelled:
                return True
            if timer.owner is not None and not self.instances[timer.owner].alive:
                return True
            timer.callback()
        else:
            _, dest_id, m, sender, via = event
            dest = self.instances[dest_id]
            if not dest.alive or dest.actor is None:
                self.record("drop", msg=m.id, msg_kind=m.kind.value, src=sender, dst=dest_id)
                return True
            self.record("deliver", msg=m.id, msg_kind=m.kind.value, src=sender, dst=dest_id,
                        via=via.value)
            dest.actor.receive(m, sender)
        return True

    def _check_horizon(self, horizon: Optional[int]) -> None:
        if horizon is not None and self._queue and self._queue[0][0] > horizon:
            raise HorizonExceeded(
                f"next event at {self._queue[0][0]} ms is beyond horizon {horizon} ms")

    def run_until_idle(self, horizon: Optional[int] = None) -> int:
        horizon = self.horizon if horizon is None else horizon
        while self._queue:
            self._check_horizon(horizon)
            self.step()
        return self.now

    def run(self, until: int) -> int:
        """Process every event due at or before ``until``; clock ends at ``until``."""
        while self._queue and self._queue[0][0] <= until:
            self.step()
        if until > self.now:
            self.clock.advance_to(until)
        return self.now

    def run_until(self, predicate: Callable[[], bool], horizon: Optional[int] = None) -> int:
        horizon = self.horizon if horizon is None else horizon
        while not predicate():
            if not self._queue:
                raise HorizonExceeded("event queue drained before condition held")
            self._check_horizon(horizon)
            self.step()
        return self.now

    # ─── trace ───────────────────────────────────────────────────────────────

    def record(self, kind: str, **fields) -> None:
        if not self._trace_enabled:
            return
        rec = {"t": self.now, "ev": kind, **fields}
        self.trace.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))

    def trace_records(self) -> list[dict]:
        return [json.loads(line) for line in self.trace]

    def trace_digest(self) -> str:
        h = hashlib.sha256()
        for line in self.trace:
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    def write_trace(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.trace:
                fh.write(line + "\n")


class Actor:
    """Base for anything living on an instance: master, worker, proxy, client."""

    def __init__(self, network: Network, shared_key: str):
        self.network = network
        self.shared_key = shared_key
        self.instance: Optional[Instance] = None
        self.uri: Optional[NodeUri] = None

    @property
    def id(self) -> Optional[str]:
        return self.instance.id if self.instance else None

    @property
    def now(self) -> int:
        return self.network.now

    def bind(self, instance: Instance, uri: NodeUri) -> None:
        self.instance = instance
        self.uri = uri
        self.network.attach(instance.id, self)

    def post(self, kind: MessageKind, target: NodeUri, payload: Optional[dict] = None,
             ref_id: Optional[str] = None) -> Receipt:
        """Send to a node uri; proxy-encoded uris go through their balancer."""
        m = self.network.message(kind, self.uri, target, self.shared_key, payload, ref_id)
        balanced = target.via_proxy or self.network.is_balancer(target.address)
        via = Via.INPUT_ENDPOINT if balanced else Via.DIRECT
        return self.network.send(m, via, sender=self.id)

    def after(self, delay: int, callback: Callable[[], None]) -> Timer:
        return self.network.schedule(delay, callback, owner=self.id)

    def receive(self, m: Message, sender: Optional[str]) -> None:
        raise NotImplementedError
