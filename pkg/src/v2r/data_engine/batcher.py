"""Dynamic batch formation per model queue.

A batch is emitted when the queue reaches the planned batch size
(``size``), when some queued request has waited its full ``deadline_ms``
(``timeout``), or when the queue is flushed (``drain``). Emission happens
under the queue lock, so batches leave in FIFO order and a plan switch is
atomic with respect to batch formation.
"""

from __future__ import annotations

import itertools
import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from ..errors import DataEngineError, PayloadMismatch, QueueClosed, UnknownModelQueue


def monotonic_ms() -> float:
    return time.monotonic() * 1000.0


class ManualClock:
    """Millisecond clock that only moves when told to."""

    def __init__(self, start: float = 0.0):
        self.now = float(start)

    def __call__(self) -> float:
        return self.now

    def advance(self, ms: float) -> float:
        self.now += ms
        return self.now

    def set(self, ms: float) -> float:
        if ms < self.now:
            raise ValueError("clock cannot go backwards")
        self.now = float(ms)
        return self.now


@dataclass
class InferenceRequest:
    request_id: int
    model_id: str
    payload: np.ndarray
    deadline_ms: float = 20.0
    enqueued_at: float | None = None

    def __post_init__(self):
        if not self.deadline_ms > 0:
            raise DataEngineError(f"deadline_ms must be > 0, got {self.deadline_ms}")


@dataclass
class InferenceBatch:
    batch_id: int
    model_id: str
    requests: list
    formed_at: float
    trigger: str
    plan_batch_size: int = 0

    def __len__(self):
        return len(self.requests)

    @property
    def request_ids(self) -> list:
        return [r.request_id for r in self.requests]

    @property
    def payloads(self) -> list:
        return [r.payload for r in self.requests]

    def max_wait_ms(self) -> float:
        return max(self.formed_at - r.enqueued_at for r in self.requests)


class DynamicBatcher:
    def __init__(self, model_id: str, batch_size: int = 1, on_batch=None, clock=monotonic_ms,
                 input_spec=None, batch_ids=None):
        if batch_size < 1:
            raise DataEngineError("batch_size must be >= 1")
        self.model_id = model_id
        self.batch_size = batch_size
        self.on_batch = on_batch or (lambda batch: None)
        self.clock = clock
        self.input_spec = input_spec
        self._batch_ids = batch_ids or itertools.count()
        self._queue = deque()
        self._cond = threading.Condition()
        self._closed = False
        self._thread = None
        self._stop = False

    def __len__(self):
        return len(self._queue)

    @property
    def closed(self) -> bool:
        return self._closed

    def _check_payload(self, req):
        if req.model_id != self.model_id:
            raise PayloadMismatch(f"request for {req.model_id!r} submitted to queue {self.model_id!r}")
        spec = self.input_spec
        if spec is None:
            return
        want = {"f32": np.float32, "u8": np.uint8}[spec.dtype]
        p = req.payload
        if not isinstance(p, np.ndarray) or p.dtype != want or tuple(p.shape) != spec.item_dims:
            got = f"{p.dtype}{tuple(p.shape)}" if isinstance(p, np.ndarray) else type(p).__name__
            raise PayloadMismatch(f"request {req.request_id}: got {got}, want {spec.dtype}{spec.item_dims}")

    def _emit(self, n, trigger, now):
        reqs = [self._queue.popleft() for _ in range(min(n, len(self._queue)))]
        batch = InferenceBatch(next(self._batch_ids), self.model_id, reqs, now, trigger, self.batch_size)
        self.on_batch(batch)
        return batch

    def _emit_full(self, now):
        out = []
        while len(self._queue) >= self.batch_size:
            out.append(self._emit(self.batch_size, "size", now))
        return out

    def submit(self, req: InferenceRequest) -> list:
        """Enqueue ``req``; returns any batches this submission completed."""
        self._check_payload(req)
        with self._cond:
            if self._closed:
                raise QueueClosed(f"queue {self.model_id!r} is closed")
            now = self.clock()
            if req.enqueued_at is None:
                req.enqueued_at = now
            self._queue.append(req)
            out = self._emit_full(now)
            self._cond.notify_all()
            return out

    def set_batch_size(self, batch_size: int) -> list:
        if batch_size < 1:
            raise DataEngineError("batch_size must be >= 1")
        with self._cond:
            self.batch_size = batch_size
            out = self._emit_full(self.clock())
            self._cond.notify_all()
            return out

    def next_due(self):
        """Earliest time at which a queued request reaches its deadline."""
        with self._cond:
            if not self._queue:
                return None
            return min(r.enqueued_at + r.deadline_ms for r in self._queue)

    def poll(self) -> list:
        """Emit timeout batches until no queued request is past its deadline."""
        out = []
        with self._cond:
            now = self.clock()
            while self._queue and any(now - r.enqueued_at >= r.deadline_ms for r in self._queue):
                out.append(self._emit(self.batch_size, "timeout", now))
        return out

    def drain(self) -> list:
        out = []
        with self._cond:
            now = self.clock()
            while self._queue:
                out.append(self._emit(self.batch_size, "drain", now))
        return out

    def close(self) -> list:
        with self._cond:
            self._closed = True
            out = self.drain()
            self._cond.notify_all()
        return out

    # real-clock background timer -------------------------------------------
    def start(self):
        if self._thread is None:
            self._stop = False
            self._thread = threading.Thread(target=self._run, name=f"batcher-{self.model_id}", daemon=True)
            self._thread.start()
        return self

    def stop(self):
        with self._cond:
            self._stop = True
            self._cond.notify_all()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def _run(self):
        with self._cond:
            while not self._stop:
                if not self._queue:
                    self._cond.wait()
                    continue
                due = min(r.enqueued_at + r.deadline_ms for r in self._queue)
                wait = due - self.clock()
                if wait > 0:
                    self._cond.wait(wait / 1000.0)
                    continue
                now = self.clock()
                while self._queue and any(now - r.enqueued_at >= r.deadline_ms for r in self._queue):
                    self._emit(self.batch_size, "timeout", now)


def replay(batcher: DynamicBatcher, clock: ManualClock, events) -> None:
    """Drive ``batcher`` through a time-ordered script on a manual clock.

    ``events`` is an iterable of ``(time_ms, fn)``; before each event the
    clock visits every deadline that falls due, so no request ever waits
    past its deadline.
    """
    for t, fn in sorted(events, key=lambda e: e[0]):
        _advance(batcher, clock, t)
        fn()


def _advance(batcher, clock, t):
    while True:
        due = batcher.next_due()
        if due is None or due > t:
            break
        clock.set(max(due, clock.now))
        batcher.poll()
    clock.set(t)
    batcher.poll()


def run_until_idle(batcher: DynamicBatcher, clock: ManualClock) -> None:
    while (due := batcher.next_due()) is not None:
        _advance(batcher, clock, due)


class DataEngine:
    """Per-model request queues plus request-id allocation."""

    def __init__(self, clock=monotonic_ms, first_request_id: int = 1):
        self.clock = clock
        self._queues = {}
        self._ids = itertools.count(first_request_id)
        self._batch_ids = itertools.count(1)
        self._lock = threading.Lock()

    def next_request_id(self) -> int:
        return next(self._ids)

    def open_queue(self, model_id, batch_size=1, on_batch=None, input_spec=None) -> DynamicBatcher:
        with self._lock:
            if model_id in self._queues:
                raise DataEngineError(f"queue {model_id!r} already open")
            q = DynamicBatcher(model_id, batch_size, on_batch, self.clock, input_spec, self._batch_ids)
            self._queues[model_id] = q
            return q

    def queue(self, model_id) -> DynamicBatcher:
        try:
            return self._queues[model_id]
        except KeyError:
            raise UnknownModelQueue(f"no queue for model {model_id!r}") from None

    def apply_plan(self, plan) -> list:
        return self.queue(plan.model_id).set_batch_size(plan.batch_size)

    def submit(self, req: InferenceRequest) -> list:
        return self.queue(req.model_id).submit(req)

    def drain_all(self) -> list:
        out = []
        for q in list(self._queues.values()):
            out.extend(q.drain())
        return out

    def close(self) -> list:
        out = []
        for q in list(self._queues.values()):
            q.stop()
            out.extend(q.close())
        return out
