"""Emulated blob store and notification queues used as the file-transfer
channel between clients, the master and workers.

Blobs carry file contents; a notification queue carries one Start and one End
notice per transfer. Transfers on one channel are serialized, so a channel's
notices never interleave.
"""
from __future__ import annotations

import enum
import hashlib
import itertools
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

DEFAULT_TTL_MS = 3_600_000
NOTICE_QUEUE = "transfers"


class StorageError(Exception):
    pass


class StorageUnavailable(StorageError):
    pass


class NotFound(StorageError):
    pass


class Expired(StorageError):
    pass


class UnknownAccount(StorageError):
    pass


class Phase(enum.Enum):
    START = "Start"
    END = "End"


class Direction(enum.Enum):
    UPLOAD = "Upload"
    DOWNLOAD = "Download"


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def blob_name(app_id: str, unit_id: str, role: str, filename: str) -> str:
    if role not in ("in", "out"):
        raise ValueError(f"role must be 'in' or 'out', not {role!r}")
    return f"{app_id}/{unit_id}/{role}/{filename}"


@dataclass(frozen=True)
class Blob:
    data: bytes
    sha256: str
    created_at: int


class BlobStore:
    def __init__(self):
        self.containers: dict[str, dict[str, Blob]] = {}
        self.available = True

    def _check(self):
        if not self.available:
            raise StorageUnavailable("blob service unavailable")

    def create_container(self, container: str) -> None:
        self._check()
        self.containers.setdefault(container, {})

    def put(self, container: str, name: str, data: bytes, now: int = 0, create: bool = False) -> Blob:
        self._check()
        if container not in self.containers:
            if not create:
                raise NotFound(f"container {container!r}")
            self.create_container(container)
        blob = Blob(bytes(data), sha256(data), now)
        self.containers[container][name] = blob
        return blob

    def get(self, container: str, name: str) -> Blob:
        self._check()
        try:
            return self.containers[container][name]
        except KeyError:
            raise NotFound(f"{container}/{name}") from None

    def exists(self, container: str, name: str) -> bool:
        return name in self.containers.get(container, {})

    def names(self, container: str) -> list[str]:
        return sorted(self.containers.get(container, {}))

    def persist(self, root) -> None:
        """Mirror every blob into a directory tree for post-run inspection."""
        root = Path(root)
        for container, blobs in sorted(self.containers.items()):
            for name, blob in sorted(blobs.items()):
                path = root / container / name
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(blob.data)


@dataclass(frozen=True)
class TransferNotice:
    transfer_id: str
    file_name: str
    phase: Phase
    direction: Direction
    at: int

    def as_record(self) -> dict:
        return {"transfer": self.transfer_id, "file": self.file_name, "phase": self.phase.value,
                "direction": self.direction.value, "at": self.at}


class NotificationQueue:
    """FIFO of transfer notices. ``history`` keeps everything ever enqueued."""

    def __init__(self, name: str):
        self.name = name
        self._items: deque[TransferNotice] = deque()
        self.history: list[TransferNotice] = []

    def put(self, notice: TransferNotice) -> None:
        self._items.append(notice)
        self.history.append(notice)

    def get(self) -> Optional[TransferNotice]:
        return self._items.popleft() if self._items else None

    def peek(self) -> Optional[TransferNotice]:
        return self._items[0] if self._items else None

    def __len__(self) -> int:
        return len(self._items)


@dataclass
class ConnectionString:
    account: str
    key: str
    container: str
    expiry: int
    # per-channel serialization cursor
    busy_until: int = 0

    def __str__(self) -> str:
        return (f"AccountName={self.account};AccountKey={self.key};"
                f"Container={self.container};Expiry={self.expiry}")


@dataclass
class TransferResult:
    name: str
    transfer_id: Optional[str] = None
    error: Optional[StorageError] = None
    data: Optional[bytes] = None
    end_at: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.error is None


class LocalDirectory:
    """Writable scratch space of one container (stands in for role-local disk)."""

    def __init__(self):
        self.files: dict[str, bytes] = {}

    def write(self, name: str, data: bytes) -> None:
        self.files[name] = bytes(data)

    def read(self, name: str) -> bytes:
        try:
            return self.files[name]
        except KeyError:
            raise NotFound(f"local file {name!r}") from None


class StorageService:
    """Channel controller plus file handler over one blob store.

    ``clock`` returns the current virtual time. Every transfer takes
    ``op_ms`` and starts no earlier than the previous transfer on the same
    channel ended; the returned timestamps may therefore lie in the future.
    """

    def __init__(self, clock: Callable[[], int], accounts: Optional[dict[str, str]] = None,
                 op_ms: int = 5, ttl_ms: int = DEFAULT_TTL_MS, blobs: Optional[BlobStore] = None,
                 listener: Optional[Callable[[TransferNotice], None]] = None):
        self.clock = clock
        self.accounts = dict(accounts or {})
        self.op_ms = op_ms
        self.ttl_ms = ttl_ms
        self.blobs = blobs or BlobStore()
        self.queues: dict[str, NotificationQueue] = {}
        # sees every notice as it is enqueued (the cluster copies them into the trace)
        self.listener = listener
        self._ids = itertools.count(1)

    def queue(self, name: str = NOTICE_QUEUE) -> NotificationQueue:
        return self.queues.setdefault(name, NotificationQueue(name))

    def open_channel(self, account: str, container: str) -> ConnectionString:
        if account not in self.accounts:
            raise UnknownAccount(account)
        self.blobs.create_container(container)
        now = self.clock()
        return ConnectionString(account, self.accounts[account], container, now + self.ttl_ms, now)

    def _validate(self, conn: ConnectionString) -> None:
        if self.accounts.get(conn.account) != conn.key:
            raise UnknownAccount(conn.account)
        if self.clock() > conn.expiry:
            raise Expired(f"connection string expired at {conn.expiry}")
        if not self.blobs.available:
            raise StorageUnavailable("blob service unavailable")

    def _slot(self, conn: ConnectionString) -> tuple[int, int]:
        start = max(self.clock(), conn.busy_until)
        end = start + self.op_ms
        conn.busy_until = end
        return start, end

    def _notify(self, tid: str, name: str, direction: Direction, start: int, end: int) -> None:
        q = self.queue()
        for notice in (TransferNotice(tid, name, Phase.START, direction, start),
                       TransferNotice(tid, name, Phase.END, direction, end)):
            q.put(notice)
            if self.listener is not None:
                self.listener(notice)

    def upload(self, conn: ConnectionString, name: str, data: bytes) -> TransferResult:
        self._validate(conn)
        tid = f"t{next(self._ids):06d}"
        start, end = self._slot(conn)
        self.blobs.put(conn.container, name, data, end)
        self._notify(tid, name, Direction.UPLOAD, start, end)
        return TransferResult(name, tid, end_at=end)

    def download(self, conn: ConnectionString, name: str) -> TransferResult:
        self._validate(conn)
        blob = self.blobs.get(conn.container, name)
        tid = f"t{next(self._ids):06d}"
        start, end = self._slot(conn)
        self._notify(tid, name, Direction.DOWNLOAD, start, end)
        return TransferResult(name, tid, data=blob.data, end_at=end)

    def upload_file(self, conn: ConnectionString, name: str, data: bytes) -> str:
        return self.upload(conn, name, data).transfer_id

    def download_file(self, conn: ConnectionString, name: str) -> bytes:
        return self.download(conn, name).data

    def transfer_collection(self, conn: ConnectionString, names: Iterable[str], direction: Direction,
                            local: Optional[LocalDirectory] = None) -> list[TransferResult]:
        """Move several files in list order; failures are reported per file.

        Uploads read from ``local``; downloads write into it when given.
        """
        results = []
        for name in names:
            try:
                if direction is Direction.UPLOAD:
                    if local is None:
                        raise ValueError("uploads need a local directory to read from")
                    res = self.upload(conn, name, local.read(name))
                else:
                    res = self.download(conn, name)
                    if local is not None:
                        local.write(name, res.data)
            except StorageError as exc:
                res = TransferResult(name, error=exc)
            results.append(res)
        return results
