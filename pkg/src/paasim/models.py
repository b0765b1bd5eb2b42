"""Client-side programming models.

The Task model is submit-and-forget: build an application from independent
tasks, submit it once and wait for (or be called back on) completion. The
Thread model mirrors a local thread: each remote thread is started, joined
and possibly aborted individually. Joining waits in virtual time by running
the event loop until the thread reaches a terminal state.
"""
from __future__ import annotations

import copy
import enum
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from .core import (
    AppState,
    Application,
    FileEntry,
    Message,
    MessageKind,
    Model,
    NodeUri,
    WorkUnit,
    authenticate,
)
from .master import EmptyApplication
from .netsim import Actor, Network
from .storage import StorageService, blob_name, sha256
from .worker import _tile_counts, mandelbrot_cost

log = logging.getLogger(__name__)


class InvalidThreadState(RuntimeError):
    pass


class AlreadySubmitted(RuntimeError):
    pass


class BadTiling(ValueError):
    pass


# ─── client actor ────────────────────────────────────────────────────────────

class Client(Actor):
    """The user's process. Uploads input files, then submits over the network."""

    def __init__(self, network: Network, shared_key: str, master_uri: NodeUri,
                 storage: Optional[StorageService] = None, storage_account: Optional[str] = None,
                 data_container: str = "appfiles", name: str = "client"):
        super().__init__(network, shared_key)
        self.master_uri = master_uri
        self.storage = storage
        self.storage_account = storage_account
        self.data_container = data_container
        self.name = name
        self.rejections: list[dict] = []
        self._app_ids = itertools.count(1)
        self._apps: dict[str, Any] = {}
        self._unit_owner: dict[str, Any] = {}

    def new_app_id(self) -> str:
        return f"{self.name}-app{next(self._app_ids):03d}"

    def register(self, app_id: str, owner) -> None:
        self._apps[app_id] = owner

    def track_unit(self, unit_id: str, owner) -> None:
        self._unit_owner[unit_id] = owner

    def send_application(self, app: Application, files: Optional[dict[str, bytes]] = None) -> int:
        """Upload ``files`` (blob name -> bytes), then submit once the last upload ended.

        Returns the virtual time the submission leaves the client.
        """
        send_at = self.now
        if files:
            conn = self.storage.open_channel(self.storage_account, self.data_container)
            for name, data in files.items():
                send_at = max(send_at, self.storage.upload(conn, name, data).end_at)
        snapshot = copy.deepcopy(app)

        def deliver():
            self.post(MessageKind.SUBMIT_APPLICATION, self.master_uri, {"application": snapshot})

        if send_at > self.now:
            self.after(send_at - self.now, deliver)
        else:
            deliver()
        return send_at

    def request_abort(self, unit_id: str) -> None:
        self.post(MessageKind.ABORT_WORK_UNIT, self.master_uri, {"unit_id": unit_id})

    def receive(self, m: Message, sender) -> None:
        if not authenticate(m, self.shared_key):
            log.warning("client dropped %s: bad shared key", m.id)
            return
        p = m.payload
        if m.kind is MessageKind.WORK_UNIT_RESULT:
            owner = self._unit_owner.get(p["unit_id"])
            if owner is not None:
                owner.on_unit_result(p["unit_id"], p["status"], p.get("result"))
        elif m.kind is MessageKind.CONTROL_ACK:
            event = p.get("event")
            if event == "unit_started":
                owner = self._unit_owner.get(p["unit_id"])
                if owner is not None:
                    owner.on_unit_started(p["unit_id"])
            elif event == "application_finished":
                owner = self._apps.get(p["app_id"])
                if owner is not None:
                    owner.on_app_finished(AppState(p["state"]))
            elif event == "rejected":
                self.rejections.append(p)
            # "submitted" and "abort_rejected" need no client-side action


# ─── task model ──────────────────────────────────────────────────────────────

class TaskApplicationHandle:
    """Submit-and-forget handle. There is deliberately no per-task control."""

    def __init__(self, client: Client, user: str = "user"):
        self.client = client
        self.app = Application(client.new_app_id(), user, Model.TASK)
        self.files: dict[str, bytes] = {}
        self.submitted = False
        self.results: dict[str, Any] = {}
        self.statuses: dict[str, str] = {}
        self.submitted_at: Optional[int] = None
        self.finished_at: Optional[int] = None
        self._callbacks: list[Callable[["TaskApplicationHandle"], None]] = []

    @property
    def app_id(self) -> str:
        return self.app.id

    @property
    def unit_ids(self) -> list[str]:
        return [u.id for u in self.app.units]

    @property
    def state(self) -> AppState:
        return self.app.state

    @property
    def finished(self) -> bool:
        return self.app.state in (AppState.FINISHED, AppState.FAILED)

    @property
    def elapsed(self) -> Optional[int]:
        if self.finished_at is None:
            return None
        return self.finished_at - self.submitted_at

    def add_task(self, operation: str, params: Optional[dict] = None, cost: float = 0,
                 inputs: Optional[dict[str, bytes]] = None, outputs=()) -> str:
        if self.submitted:
            raise AlreadySubmitted(f"{self.app.id} was already submitted")
        uid = f"{self.app.id}-u{len(self.app.units):04d}"
        unit = WorkUnit(uid, self.app.id, Model.TASK, operation, dict(params or {}), cost)
        for name, data in (inputs or {}).items():
            unit.input_files.append(FileEntry(name, len(data), sha256(data)))
            self.files[blob_name(self.app.id, uid, "in", name)] = data
        unit.output_files = [FileEntry(n) for n in outputs]
        self.app.units.append(unit)
        return uid

    def add_shared_file(self, name: str, data: bytes) -> None:
        if self.submitted:
            raise AlreadySubmitted(f"{self.app.id} was already submitted")
        self.app.shared_files.append(FileEntry(name, len(data), sha256(data)))
        self.files[blob_name(self.app.id, "shared", "in", name)] = data

    def submit(self) -> "TaskApplicationHandle":
        if self.submitted:
            raise AlreadySubmitted(f"{self.app.id} was already submitted")
        if not self.app.units:
            raise EmptyApplication(f"application {self.app.id} has no tasks")
        self.submitted = True
        self.submitted_at = self.client.now
        self.app.state = AppState.SUBMITTED
        self.client.register(self.app.id, self)
        for u in self.app.units:
            self.client.track_unit(u.id, self)
        self.client.send_application(self.app, self.files)
        return self

    def on_complete(self, callback: Callable[["TaskApplicationHandle"], None]) -> None:
        if self.finished:
            callback(self)
        else:
            self._callbacks.append(callback)

    def on_unit_started(self, unit_id: str) -> None:
        pass

    def on_unit_result(self, unit_id: str, status: str, result) -> None:
        self.statuses[unit_id] = status
        self.results[unit_id] = result

    def on_app_finished(self, state: AppState) -> None:
        if self.finished:
            return
        self.app.state = state
        self.finished_at = self.client.now
        callbacks, self._callbacks = self._callbacks, []
        for cb in callbacks:
            cb(self)

    def wait(self, horizon: Optional[int] = None) -> AppState:
        self.client.network.run_until(lambda: self.finished, horizon)
        return self.state


def task_app_submit(client: Client, ops, user: str = "user") -> TaskApplicationHandle:
    """Build and submit a Task application from ``(operation, params, cost[, files])`` tuples.

    ``files`` is an optional ``(inputs, outputs)`` pair: a name->bytes dict
    and a list of output file names.
    """
    ops = list(ops)
    if not ops:
        raise EmptyApplication("no tasks given")
    handle = TaskApplicationHandle(client, user)
    for op in ops:
        operation, params, cost, *rest = op
        inputs, outputs = (rest[0] if rest and rest[0] else ({}, ()))
        handle.add_task(operation, params, cost, inputs, outputs)
    return handle.submit()


# ─── thread model ────────────────────────────────────────────────────────────

class ThreadState(enum.Enum):
    UNSTARTED = "Unstarted"
    STARTED = "Started"
    RUNNING = "Running"
    ABORTED = "Aborted"
    STOPPED = "Stopped"

    @property
    def terminal(self) -> bool:
        return self in (ThreadState.ABORTED, ThreadState.STOPPED)


THREAD_TRANSITIONS: dict[ThreadState, frozenset[ThreadState]] = {
    ThreadState.UNSTARTED: frozenset({ThreadState.STARTED, ThreadState.ABORTED}),
    ThreadState.STARTED: frozenset({ThreadState.RUNNING, ThreadState.STOPPED, ThreadState.ABORTED}),
    ThreadState.RUNNING: frozenset({ThreadState.STOPPED, ThreadState.ABORTED}),
    ThreadState.ABORTED: frozenset(),
    ThreadState.STOPPED: frozenset(),
}


class ThreadApplication:
    """Groups remote threads under one application id."""

    def __init__(self, client: Client, user: str = "user"):
        self.client = client
        self.id = client.new_app_id()
        self.user = user
        self.threads: list[RemoteThread] = []
        client.register(self.id, self)

    def new_thread(self, operation: str, params: Optional[dict] = None, cost: float = 0,
                   inputs: Optional[dict[str, bytes]] = None, outputs=()) -> "RemoteThread":
        uid = f"{self.id}-t{len(self.threads):04d}"
        unit = WorkUnit(uid, self.id, Model.THREAD, operation, dict(params or {}), cost)
        files = {}
        for name, data in (inputs or {}).items():
            unit.input_files.append(FileEntry(name, len(data), sha256(data)))
            files[blob_name(self.id, uid, "in", name)] = data
        unit.output_files = [FileEntry(n) for n in outputs]
        t = RemoteThread(self, unit, files)
        self.threads.append(t)
        self.client.track_unit(uid, t)
        return t

    def on_app_finished(self, state: AppState) -> None:
        # thread completion is tracked per thread
        pass


class RemoteThread:
    def __init__(self, app: ThreadApplication, unit: WorkUnit, files: dict[str, bytes]):
        self.app = app
        self.unit = unit
        self._files = files
        self.state = ThreadState.UNSTARTED
        self.result: Any = None
        self.error: Optional[str] = None
        self.history: list[tuple[int, ThreadState]] = [(app.client.now, ThreadState.UNSTARTED)]
        self.abort_requested = False
        self._callbacks: list[Callable[["RemoteThread"], None]] = []

    @property
    def id(self) -> str:
        return self.unit.id

    @property
    def client(self) -> Client:
        return self.app.client

    @property
    def started_at(self) -> Optional[int]:
        return next((t for t, s in self.history if s is ThreadState.STARTED), None)

    @property
    def finished_at(self) -> Optional[int]:
        return self.history[-1][0] if self.state.terminal else None

    def _move(self, new: ThreadState) -> None:
        if new not in THREAD_TRANSITIONS[self.state]:
            raise InvalidThreadState(f"{self.id}: {self.state.value} -> {new.value}")
        self.state = new
        self.history.append((self.client.now, new))
        if new.terminal:
            callbacks, self._callbacks = self._callbacks, []
            for cb in callbacks:
                cb(self)

    def start(self) -> None:
        if self.state is not ThreadState.UNSTARTED:
            raise InvalidThreadState(f"cannot start {self.id} in state {self.state.value}")
        self._move(ThreadState.STARTED)
        app = Application(self.app.id, self.app.user, Model.THREAD, [self.unit])
        self.client.send_application(app, self._files)

    def abort(self) -> None:
        if self.state.terminal:
            raise InvalidThreadState(f"cannot abort {self.id} in state {self.state.value}")
        if self.state is ThreadState.UNSTARTED:
            self._move(ThreadState.ABORTED)
            return
        if not self.abort_requested:
            self.abort_requested = True
            self.client.request_abort(self.id)

    def join(self, horizon: Optional[int] = None):
        """Wait in virtual time until terminal; returns the result, or ABORTED."""
        if self.state is ThreadState.UNSTARTED:
            raise InvalidThreadState(f"cannot join {self.id} before it is started")
        if not self.state.terminal:
            self.client.network.run_until(lambda: self.state.terminal, horizon)
        return self.result if self.state is ThreadState.STOPPED else ThreadState.ABORTED

    def on_terminal(self, callback: Callable[["RemoteThread"], None]) -> None:
        """Continuation form of join."""
        if self.state.terminal:
            callback(self)
        else:
            self._callbacks.append(callback)

    # notifications from the client actor

    def on_unit_started(self, unit_id: str) -> None:
        if self.state is ThreadState.STARTED:
            self._move(ThreadState.RUNNING)

    def on_unit_result(self, unit_id: str, status: str, result) -> None:
        if self.state.terminal:
            return
        if status == "Aborted":
            self._move(ThreadState.ABORTED)
        else:
            # a unit that failed for good still ends the thread; the error is kept
            if status == "Failed":
                self.error = str(result)
            else:
                self.result = result
            self._move(ThreadState.STOPPED)


# ─── Mandelbrot ──────────────────────────────────────────────────────────────

WINDOW = (-2.5, -1.0, 1.0, 1.0)


def tile_grid(tiles: int) -> tuple[int, int]:
    """(rows, cols) with rows the largest divisor of ``tiles`` not above its square root."""
    if tiles < 1:
        raise BadTiling("tiles must be >= 1")
    rows = max(d for d in range(1, math.isqrt(tiles) + 1) if tiles % d == 0)
    return rows, tiles // rows


def tile_params(width: int, height: int, tiles: int, max_iter: int,
                window: tuple[float, float, float, float] = WINDOW) -> list[dict]:
    """Row-major tile parameters covering the window."""
    rows, cols = tile_grid(tiles)
    if width <= 0 or height <= 0 or width % cols or height % rows:
        raise BadTiling(f"{width}x{height} image cannot be cut into {rows}x{cols} tiles")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    x0, y0, x1, y1 = window
    tw, th = width // cols, height // rows
    dx, dy = (x1 - x0) / width, (y1 - y0) / height
    out = []
    for r in range(rows):
        for c in range(cols):
            out.append({
                "cx0": x0 + c * tw * dx, "cy0": y0 + r * th * dy,
                "cx1": x0 + (c + 1) * tw * dx, "cy1": y0 + (r + 1) * th * dy,
                "max_iter": max_iter, "pixels": tw * th, "width": tw,
                "row": r, "col": c,
            })
    return out


@dataclass
class MandelbrotRun:
    app: ThreadApplication
    threads: list[RemoteThread]
    width: int
    height: int
    max_iter: int
    params: list[dict] = field(default_factory=list)
    started_at: Optional[int] = None
    _pending: Optional[int] = None

    @property
    def done(self) -> bool:
        if self._pending is None:
            return all(t.state.terminal for t in self.threads)
        return self._pending == 0

    def _one_done(self, _thread) -> None:
        self._pending -= 1

    @property
    def finished_at(self) -> Optional[int]:
        if not self.done:
            return None
        return max(t.finished_at for t in self.threads)

    @property
    def elapsed(self) -> Optional[int]:
        end = self.finished_at
        return None if end is None else end - self.started_at

    @property
    def costs(self) -> list[float]:
        return [t.unit.cost for t in self.threads]

    def start(self) -> "MandelbrotRun":
        self.started_at = self.app.client.now
        self._pending = len(self.threads)
        for t in self.threads:
            t.on_terminal(self._one_done)
            t.start()
        return self

    def join(self, horizon: Optional[int] = None) -> list[int]:
        self.app.client.network.run_until(lambda: self.done, horizon)
        return self.histogram()

    def histogram(self) -> list[int]:
        total = np.zeros(self.max_iter + 1, dtype=np.int64)
        for t in self.threads:
            if t.state is ThreadState.STOPPED and t.result is not None:
                total += np.asarray(t.result, dtype=np.int64)
        return total.tolist()

    def image(self) -> np.ndarray:
        """Per-pixel escape counts, assembled from the tiles (recomputed locally)."""
        img = np.zeros((self.height, self.width), dtype=np.int64)
        for p in self.params:
            counts = _tile_counts(p)
            th, tw = counts.shape
            img[p["row"] * th:(p["row"] + 1) * th, p["col"] * tw:(p["col"] + 1) * tw] = counts
        return img

    def write_ppm(self, path) -> Path:
        img = self.image()
        shade = (255 * (1 - img / self.max_iter)).astype(np.uint8)
        inside = img >= self.max_iter
        rgb = np.stack([shade // 2, shade // 3, shade], axis=-1)
        rgb[inside] = 0
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(f"P6\n{self.width} {self.height}\n255\n".encode())
            fh.write(rgb.tobytes())
        return path


def mandelbrot_app(client: Client, width: int, height: int, tiles: int, max_iter: int,
                   window: tuple[float, float, float, float] = WINDOW,
                   uniform_cost: Optional[float] = None) -> MandelbrotRun:
    """One remote thread per tile. ``uniform_cost`` overrides the per-tile cost
    (the histogram is still the real one)."""
    params = tile_params(width, height, tiles, max_iter, window)
    app = ThreadApplication(client)
    threads = []
    for p in params:
        wire = {k: v for k, v in p.items() if k not in ("row", "col")}
        cost = uniform_cost if uniform_cost is not None else mandelbrot_cost(wire)
        threads.append(app.new_thread("mandelbrot_tile", wire, cost))
    return MandelbrotRun(app, threads, width, height, max_iter, params)
