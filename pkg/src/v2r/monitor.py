"""Worker telemetry: workers publish status, a master keeps the latest per
worker and serves snapshots annotated with staleness."""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field

from .errors import MalformedStatus

DEFAULT_TTL_MS = 3000
U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1


def utc_ms() -> int:
    return int(time.time() * 1000)


@dataclass
class WorkerStatus:
    worker_id: str
    timestamp: int
    cpu_pct: float
    mem_bytes: int
    queue_depths: dict = field(default_factory=dict)
    inflight: dict = field(default_factory=dict)
    device_util_pct: float | None = None

    def validate(self):
        if not isinstance(self.worker_id, str) or not self.worker_id:
            raise MalformedStatus("worker_id must be a non-empty string")
        if not isinstance(self.timestamp, int) or not 0 <= self.timestamp <= U64_MAX:
            raise MalformedStatus(f"bad timestamp {self.timestamp!r}")
        if not (math.isfinite(self.cpu_pct) and 0.0 <= self.cpu_pct <= 100.0):
            raise MalformedStatus(f"cpu_pct out of range: {self.cpu_pct}")
        if not isinstance(self.mem_bytes, int) or not 0 <= self.mem_bytes <= U64_MAX:
            raise MalformedStatus(f"bad mem_bytes {self.mem_bytes!r}")
        for name, table in (("queue_depths", self.queue_depths), ("inflight", self.inflight)):
            for k, v in table.items():
                if not isinstance(k, str) or not isinstance(v, int) or not 0 <= v <= U32_MAX:
                    raise MalformedStatus(f"bad {name} entry {k!r}: {v!r}")
        if self.device_util_pct is not None and not (
            math.isfinite(self.device_util_pct) and 0.0 <= self.device_util_pct <= 100.0
        ):
            raise MalformedStatus(f"device_util_pct out of range: {self.device_util_pct}")

    def to_json(self) -> dict:
        return {
            "worker_id": self.worker_id,
            "timestamp": self.timestamp,
            "cpu_pct": self.cpu_pct,
            "mem_bytes": self.mem_bytes,
            "queue_depths": dict(self.queue_depths),
            "inflight": dict(self.inflight),
            "device_util_pct": self.device_util_pct,
        }


@dataclass(frozen=True)
class WorkerEntry:
    status: WorkerStatus
    stale: bool


@dataclass
class ClusterSnapshot:
    taken_at: int
    workers: dict

    def to_json(self) -> dict:
        return {
            "taken_at": self.taken_at,
            "workers": {
                wid: {"stale": e.stale, "status": e.status.to_json()}
                for wid, e in sorted(self.workers.items())
            },
        }


class MonitorMaster:
    """Latest-status table keyed by worker_id.

    A publish older than the stored status for the same worker is dropped
    and counted in :attr:`dropped`.
    """

    def __init__(self, clock=utc_ms, ttl_ms: int = DEFAULT_TTL_MS):
        self.clock = clock
        self.ttl_ms = ttl_ms
        self._table = {}
        self._lock = threading.Lock()
        self.dropped = 0
        self.accepted = 0

    def publish_status(self, status: WorkerStatus) -> bool:
        status.validate()
        with self._lock:
            cur = self._table.get(status.worker_id)
            if cur is not None and status.timestamp < cur.timestamp:
                self.dropped += 1
                return False
            self._table[status.worker_id] = status
            self.accepted += 1
            return True

    publish = publish_status

    def snapshot(self, ttl_ms: int | None = None) -> ClusterSnapshot:
        ttl = self.ttl_ms if ttl_ms is None else ttl_ms
        with self._lock:
            table = dict(self._table)
        newest = max((s.timestamp for s in table.values()), default=0)
        # never report a status from the snapshot's future
        taken_at = max(self.clock(), newest)
        workers = {wid: WorkerEntry(s, taken_at - s.timestamp > ttl) for wid, s in table.items()}
        return ClusterSnapshot(taken_at, workers)


def local_status(worker_id: str, queue_depths=None, inflight=None, device_util_pct=None) -> WorkerStatus:
    """Status of the current process host, sampled with psutil."""
    import psutil

    return WorkerStatus(
        worker_id=worker_id,
        timestamp=utc_ms(),
        cpu_pct=float(min(100.0, psutil.cpu_percent(interval=None))),
        mem_bytes=int(psutil.Process().memory_info().rss),
        queue_depths=dict(queue_depths or {}),
        inflight=dict(inflight or {}),
        device_util_pct=device_util_pct,
    )


class StatusPublisher:
    """Background thread publishing ``provider()`` every ``interval_s`` seconds."""

    def __init__(self, publish, provider, interval_s: float = 1.0):
        self._publish = publish
        self._provider = provider
        self.interval_s = interval_s
        self._stop = threading.Event()
        self._thread = None

    def start(self):
        self._thread = threading.Thread(target=self._loop, name="status-publisher", daemon=True)
        self._thread.start()
        return self

    def _loop(self):
        while not self._stop.is_set():
            self._publish(self._provider())
            self._stop.wait(self.interval_s)

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
