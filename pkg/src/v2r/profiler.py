"""Offline latency/throughput measurement of an executor across batch sizes."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import BatchTooLarge, EmptySamples, ExecutorFailure, InvalidProfileRequest, InvalidRecord

DEFAULT_BATCH_SIZES = (1, 2, 4, 8, 16, 32, 64)
DEFAULT_WARMUP = 3
DEFAULT_ITERATIONS = 30
DEFAULT_DEVICE = "cpu-local"


@dataclass(frozen=True)
class ProfileRecord:
    model_id: str
    device_tag: str
    batch_size: int
    lat_mean_ms: float
    lat_p50_ms: float
    lat_p95_ms: float
    lat_p99_ms: float
    throughput_ips: float
    iterations: int
    measured_at: int

    @property
    def key(self) -> tuple:
        return (self.model_id, self.device_tag, self.batch_size)

    def latency(self, which: str) -> float:
        return {"p50": self.lat_p50_ms, "p95": self.lat_p95_ms, "p99": self.lat_p99_ms}[which]

    def validate(self):
        lats = (self.lat_mean_ms, self.lat_p50_ms, self.lat_p95_ms, self.lat_p99_ms, self.throughput_ips)
        if not self.model_id or not self.device_tag:
            raise InvalidRecord("model_id and device_tag must be non-empty")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise InvalidRecord(f"batch_size must be >= 1, got {self.batch_size!r}")
        if not all(math.isfinite(x) and x > 0 for x in lats):
            raise InvalidRecord("latencies and throughput must be finite and > 0")
        if not self.lat_p50_ms <= self.lat_p95_ms <= self.lat_p99_ms:
            raise InvalidRecord(
                f"percentiles out of order: p50={self.lat_p50_ms} p95={self.lat_p95_ms} p99={self.lat_p99_ms}"
            )
        if self.iterations < 1:
            raise InvalidRecord("iterations must be >= 1")
        expected = self.batch_size / self.lat_mean_ms * 1000.0
        if abs(self.throughput_ips - expected) > 1e-3 * expected:
            raise InvalidRecord(f"throughput {self.throughput_ips} != batch_size/lat_mean ({expected})")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ProfileRecord":
        try:
            return cls(
                model_id=str(obj["model_id"]),
                device_tag=str(obj["device_tag"]),
                batch_size=int(obj["batch_size"]),
                lat_mean_ms=float(obj["lat_mean_ms"]),
                lat_p50_ms=float(obj["lat_p50_ms"]),
                lat_p95_ms=float(obj["lat_p95_ms"]),
                lat_p99_ms=float(obj["lat_p99_ms"]),
                throughput_ips=float(obj["throughput_ips"]),
                iterations=int(obj["iterations"]),
                measured_at=int(obj["measured_at"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidRecord(f"bad profile record: {exc}") from exc


def percentile(samples, p: float) -> float:
    """Nearest-rank percentile: the ``ceil(p*n)``-th smallest sample."""
    if len(samples) == 0:
        raise EmptySamples("percentile of no samples")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    ordered = sorted(samples)
    # round away float noise such as 0.07*100 == 7.000000000000001
    rank = math.ceil(round(p * len(ordered), 9))
    return ordered[max(rank, 1) - 1]


def make_record(model_id, device_tag, batch_size, samples_ms, measured_at=None) -> ProfileRecord:
    mean = float(sum(samples_ms) / len(samples_ms))
    return ProfileRecord(
        model_id=model_id,
        device_tag=device_tag,
        batch_size=batch_size,
        lat_mean_ms=mean,
        lat_p50_ms=float(percentile(samples_ms, 0.50)),
        lat_p95_ms=float(percentile(samples_ms, 0.95)),
        lat_p99_ms=float(percentile(samples_ms, 0.99)),
        throughput_ips=batch_size / mean * 1000.0,
        iterations=len(samples_ms),
        measured_at=int(time.time() * 1000) if measured_at is None else measured_at,
    )


def profile_model(model_id, executor, batch_sizes=DEFAULT_BATCH_SIZES, warmup=DEFAULT_WARMUP,
                  iterations=DEFAULT_ITERATIONS, device_tag=DEFAULT_DEVICE, cache=None, seed=0):
    """Time ``executor`` at each batch size; one record per size.

    Runs are strictly sequential. Only the ``execute`` call is timed. When a
    ``cache`` is given every record is also ``put`` into it. If the executor
    raises, :class:`ExecutorFailure` is raised with the records finished so
    far in ``.partial``.
    """
    batch_sizes = list(batch_sizes)
    if not batch_sizes or any(b < 1 for b in batch_sizes):
        raise InvalidProfileRequest("batch sizes must be non-empty and >= 1")
    if any(b2 <= b1 for b1, b2 in zip(batch_sizes, batch_sizes[1:])):
        raise InvalidProfileRequest("batch sizes must be strictly increasing")
    if iterations < 5:
        raise InvalidProfileRequest(f"iterations must be >= 5, got {iterations}")
    if warmup < 0:
        raise InvalidProfileRequest("warmup must be >= 0")
    too_big = [b for b in batch_sizes if b > executor.max_batch]
    if too_big:
        raise BatchTooLarge(f"batch sizes {too_big} exceed executor max {executor.max_batch}")

    rng = np.random.default_rng(seed)
    records = []
    for b in batch_sizes:
        inputs = [executor.sample_input(rng) for _ in range(b)]
        samples = []
        try:
            for i in range(warmup + iterations):
                t0 = time.perf_counter()
                executor.execute(inputs)
                elapsed = (time.perf_counter() - t0) * 1000.0
                if i >= warmup:
                    samples.append(elapsed)
        except Exception as exc:
            raise ExecutorFailure(f"executor failed at batch size {b}: {exc}", partial=records) from exc
        rec = make_record(model_id, device_tag, b, samples)
        if cache is not None:
            cache.put(rec)
        records.append(rec)
    return records


def write_profile(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_profile(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [ProfileRecord.from_json(json.loads(line)) for line in fh if line.strip()]
