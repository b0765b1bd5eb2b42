"""Worker container: runs one work unit at a time against a registry of
deterministic workload functions, heartbeats to the master and stages files
through the storage service."""
from __future__ import annotations

import functools
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from .core import InstanceSize, Message, MessageKind, NodeUri, SMALL, authenticate
from .netsim import Actor, Network, Timer
from .proxy import PROXY_READY
from .storage import StorageError, StorageService, LocalDirectory, blob_name

log = logging.getLogger(__name__)

HEARTBEAT_MS = 1000


class UnknownOperation(LookupError):
    pass


class Busy(RuntimeError):
    pass


class NotRunningHere(LookupError):
    pass


# ─── workloads ───────────────────────────────────────────────────────────────

Workload = Callable[[dict, float], Any]


class WorkloadRegistry:
    def __init__(self):
        self._fns: dict[str, Workload] = {}

    def register(self, name: str, fn: Optional[Workload] = None):
        if fn is None:
            return functools.partial(self.register, name)
        self._fns[name] = fn
        return fn

    def __contains__(self, name: str) -> bool:
        return name in self._fns

    def names(self) -> list[str]:
        return sorted(self._fns)

    def run(self, name: str, params: dict, cost: float) -> Any:
        try:
            fn = self._fns[name]
        except KeyError:
            raise UnknownOperation(name) from None
        return fn(params, cost)


@functools.lru_cache(maxsize=4096)
def _escape_counts(cx0: float, cy0: float, cx1: float, cy1: float, width: int, height: int,
                   max_iter: int) -> np.ndarray:
    xs = cx0 + np.arange(width, dtype=np.float64) * ((cx1 - cx0) / width)
    ys = cy0 + np.arange(height, dtype=np.float64) * ((cy1 - cy0) / height)
    c = xs[np.newaxis, :] + 1j * ys[:, np.newaxis]
    z = np.zeros_like(c)
    counts = np.full(c.shape, max_iter, dtype=np.int64)
    active = np.ones(c.shape, dtype=bool)
    for i in range(max_iter):
        z[active] = z[active] * z[active] + c[active]
        escaped = active & (z.real * z.real + z.imag * z.imag > 4.0)
        counts[escaped] = i + 1
        active &= ~escaped
        if not active.any():
            break
    counts.flags.writeable = False
    return counts


def _tile_counts(params: dict) -> np.ndarray:
    width = int(params["width"])
    pixels = int(params["pixels"])
    if width <= 0 or pixels % width:
        raise ValueError("pixels must be a multiple of width")
    return _escape_counts(float(params["cx0"]), float(params["cy0"]), float(params["cx1"]),
                          float(params["cy1"]), width, pixels // width, int(params["max_iter"]))


def mandelbrot_cost(params: dict) -> int:
    """Compute units of a tile: iterations summed over its pixels."""
    return int(_tile_counts(params).sum())


def mandelbrot_tile(params: dict, cost: float = 0) -> list[int]:
    """Histogram of escape iteration counts, bins 0..max_iter."""
    counts = _tile_counts(params)
    return np.bincount(counts.ravel(), minlength=int(params["max_iter"]) + 1).tolist()


def spin(params: dict, cost: float) -> dict:
    # uniform synthetic work: the result only echoes what was asked for
    return {"cost": cost, "tag": params.get("tag")}


def default_registry() -> WorkloadRegistry:
    reg = WorkloadRegistry()
    reg.register("mandelbrot_tile", mandelbrot_tile)
    reg.register("spin", spin)
    return reg


# ─── container ───────────────────────────────────────────────────────────────

@dataclass
class WorkerState:
    node: Optional[NodeUri]
    size: InstanceSize
    region: str
    current: Optional[str] = None
    heartbeat_enabled: bool = False
    executed_count: int = 0
    results_sent: list[str] = field(default_factory=list)
    misdelivered: int = 0
    auth_failures: int = 0


class Worker(Actor):
    """One execution container.

    In worker-deployment mode ``via_proxy`` is set: the node uri is the
    proxy's balancer address with this instance's internal endpoint encoded,
    and heartbeats start only once the proxy announces readiness.
    """

    def __init__(self, network: Network, shared_key: str, master_uri: NodeUri,
                 size: InstanceSize = SMALL, registry: Optional[WorkloadRegistry] = None,
                 storage: Optional[StorageService] = None, storage_account: Optional[str] = None,
                 data_container: str = "appfiles", heartbeat_ms: int = HEARTBEAT_MS,
                 via_proxy: bool = False):
        super().__init__(network, shared_key)
        self.master_uri = master_uri
        self.registry = registry or default_registry()
        self.storage = storage
        self.storage_account = storage_account
        self.data_container = data_container
        self.heartbeat_ms = heartbeat_ms
        self.via_proxy = via_proxy
        self.state = WorkerState(None, size, "cloud")
        self.local = LocalDirectory()
        self._unit: Optional[dict] = None
        self._pending: Optional[Timer] = None
        self._heartbeat_timer: Optional[Timer] = None
        # fault injection: a silenced worker keeps executing but stops heartbeating
        self.silenced = False

    @property
    def busy(self) -> bool:
        return self.state.current is not None

    def bind(self, instance, uri: NodeUri) -> None:
        super().bind(instance, uri)
        self.state.node = uri
        self.state.region = instance.region

    def boot(self, proxy_ready: bool = True) -> None:
        """Called once the instance is bound. Heartbeats wait for the proxy in proxy mode."""
        if not self.via_proxy or proxy_ready:
            self.enable_heartbeat()
        else:
            self.network.subscribe(PROXY_READY, lambda _: self.enable_heartbeat())

    # ─── heartbeat ───────────────────────────────────────────────────────────

    def enable_heartbeat(self) -> None:
        if self.state.heartbeat_enabled or not self.instance.alive:
            return
        self.state.heartbeat_enabled = True
        self.heartbeat_tick()

    def heartbeat_tick(self) -> None:
        if not self.state.heartbeat_enabled:
            return
        if not self.silenced:
            self.post(MessageKind.HEARTBEAT, self.master_uri, {
                "busy": self.busy,
                "executed_count": self.state.executed_count,
                "size": self.state.size.name,
                "region": self.state.region,
            })
        self._heartbeat_timer = self.after(self.heartbeat_ms, self.heartbeat_tick)

    # ─── inbound ─────────────────────────────────────────────────────────────

    def receive(self, m: Message, sender) -> None:
        if not authenticate(m, self.shared_key):
            self.state.auth_failures += 1
            log.warning("%s dropped %s: bad shared key", self.id, m.id)
            return
        ie = m.target.internal_endpoint
        own = self.uri.internal_endpoint or self.instance.address()
        if ie is not None and tuple(ie) != tuple(own):
            self.state.misdelivered += 1
            self.network.record("misdelivered", msg=m.id, at=self.id, target=str(m.target))
            return
        if m.kind is MessageKind.SUBMIT_WORK_UNIT:
            self.on_submit(m)
        elif m.kind is MessageKind.ABORT_WORK_UNIT:
            try:
                self.abort(m.payload["unit_id"])
            except NotRunningHere:
                self.post(MessageKind.CONTROL_ACK, self.master_uri,
                          {"op": "abort_rejected", "unit_id": m.payload["unit_id"]})
        else:
            log.debug("%s ignoring %s", self.id, m.kind.value)

    def on_submit(self, m: Message) -> None:
        unit = dict(m.payload["unit"])
        uid = unit["unit_id"]
        if self.busy:
            self.post(MessageKind.CONTROL_ACK, self.master_uri, {"op": "bounced", "unit_id": uid})
            return
        self.state.current = uid
        self._unit = unit
        if unit["operation"] not in self.registry:
            self._finish("Failed", error=f"UnknownOperation: {unit['operation']}")
            return
        ready_at = self.now
        inputs = list(m.payload.get("input_blobs", ()))
        if inputs:
            try:
                conn = self.storage.open_channel(self.storage_account, self.data_container)
                for name in inputs:
                    res = self.storage.download(conn, name)
                    self.local.write(name, res.data)
                    ready_at = max(ready_at, res.end_at)
            except StorageError as exc:
                self._finish("Failed", error=f"{type(exc).__name__}: {exc}")
                return
        self._pending = self.after(ready_at - self.now, self._start)

    def _start(self) -> None:
        unit = self._unit
        self.post(MessageKind.CONTROL_ACK, self.master_uri, {"op": "started", "unit_id": unit["unit_id"]})
        duration = self.state.size.duration_ms(unit["cost"])
        self.network.record("unit_start", unit=unit["unit_id"], at=self.id, duration=duration)
        self._pending = self.after(duration, self._complete)

    def _complete(self) -> None:
        unit = self._unit
        try:
            result = self.registry.run(unit["operation"], unit["params"], unit["cost"])
        except Exception as exc:  # workload bug: report, never crash the container
            self._finish("Failed", error=f"{type(exc).__name__}: {exc}")
            return
        send_at = self.now
        outputs = unit.get("output_files") or []
        if outputs:
            try:
                conn = self.storage.open_channel(self.storage_account, self.data_container)
                for fname in outputs:
                    data = json.dumps({"unit": unit["unit_id"], "file": fname, "result": result},
                                      sort_keys=True).encode()
                    name = blob_name(unit["app_id"], unit["unit_id"], "out", fname)
                    self.local.write(name, data)
                    send_at = max(send_at, self.storage.upload(conn, name, data).end_at)
            except StorageError as exc:
                self._finish("Failed", error=f"{type(exc).__name__}: {exc}")
                return
        if send_at > self.now:
            self._pending = self.after(send_at - self.now, lambda: self._finish("Completed", result))
        else:
            self._finish("Completed", result)

    def _finish(self, status: str, result: Any = None, error: Optional[str] = None) -> None:
        uid = self.state.current
        self._pending = None
        self.state.current = None
        self._unit = None
        if status == "Completed":
            self.state.executed_count += 1
        self.state.results_sent.append(uid)
        payload = {"unit_id": uid, "status": status, "result": result}
        if error:
            payload["error"] = error
        # replies go straight to the master, never back through the proxy
        self.post(MessageKind.WORK_UNIT_RESULT, self.master_uri, payload)

    def abort(self, unit_id: str) -> None:
        if self.state.current != unit_id:
            raise NotRunningHere(unit_id)
        if self._pending is not None:
            self._pending.cancel()
        self.network.record("unit_abort", unit=unit_id, at=self.id)
        self._finish("Aborted")
