"""Profile cache and SLO-constrained batch-size planning."""

from __future__ import annotations

import json
import logging
import math
import os
import threading
from dataclasses import dataclass, field

from .errors import InvalidRecord, NoProfile, OrchestratorError
from .profiler import ProfileRecord

log = logging.getLogger(__name__)

PERCENTILES = ("p50", "p95", "p99")


@dataclass(frozen=True)
class SloPolicy:
    model_id: str
    slo_ms: float
    percentile: str = "p95"

    def __post_init__(self):
        if not (isinstance(self.slo_ms, (int, float)) and math.isfinite(self.slo_ms) and self.slo_ms > 0):
            raise OrchestratorError(f"slo_ms must be finite and > 0, got {self.slo_ms!r}")
        if self.percentile not in PERCENTILES:
            raise OrchestratorError(f"percentile must be one of {PERCENTILES}")


@dataclass(frozen=True)
class BatchPlan:
    model_id: str
    batch_size: int
    expected_latency_ms: float
    expected_throughput_ips: float
    slo_satisfied: bool
    derived_from: tuple = field(default_factory=tuple)

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "batch_size": self.batch_size,
            "expected_latency_ms": self.expected_latency_ms,
            "expected_throughput_ips": self.expected_throughput_ips,
            "slo_satisfied": self.slo_satisfied,
            "derived_from": [list(p) for p in self.derived_from],
        }


class ProfileCache:
    """Map of (model_id, device_tag, batch_size) -> newest ProfileRecord.

    With a ``path`` every accepted put is appended as one JSON line; loading
    replays the file with the same newest-wins rule.
    """

    def __init__(self, path=None):
        self.path = path
        self._lock = threading.Lock()
        self._table = {}
        if path is not None and os.path.exists(path):
            self._load()

    def _load(self):
        table = {}
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = ProfileRecord.from_json(json.loads(line))
                except (ValueError, InvalidRecord) as exc:
                    log.warning("skipping bad profile cache line %d: %s", lineno, exc)
                    continue
                old = table.get(rec.key)
                if old is None or rec.measured_at >= old.measured_at:
                    table[rec.key] = rec
        self._table = table

    def put(self, record: ProfileRecord) -> None:
        record.validate()
        with self._lock:
            old = self._table.get(record.key)
            if old is not None and record.measured_at < old.measured_at:
                return
            table = dict(self._table)
            table[record.key] = record
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record.to_json()) + "\n")
            self._table = table

    def compact(self) -> None:
        """Rewrite the backing file with exactly the live entries."""
        if self.path is None:
            return
        with self._lock:
            tmp = f"{self.path}.tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                for key in sorted(self._table):
                    fh.write(json.dumps(self._table[key].to_json()) + "\n")
            os.replace(tmp, self.path)

    def records(self, model_id=None, device_tag=None) -> list:
        table = self._table
        out = [
            r for r in table.values()
            if (model_id is None or r.model_id == model_id) and (device_tag is None or r.device_tag == device_tag)
        ]
        return sorted(out, key=lambda r: r.key)

    def __len__(self):
        return len(self._table)

    def snapshot(self) -> dict:
        return dict(self._table)


def choose_batch(records, policy: SloPolicy) -> BatchPlan:
    """Highest-throughput profiled batch size whose latency meets the SLO.

    Ties go to the smaller batch size. With no feasible size the plan falls
    back to batch size 1 (or the smallest profiled) and is flagged unsatisfied.
    """
    rows = sorted(records, key=lambda r: r.batch_size)
    if not rows:
        raise NoProfile(f"no profile records for {policy.model_id}")
    provenance = tuple((r.batch_size, r.measured_at) for r in rows)
    best = None
    for r in rows:
        if r.latency(policy.percentile) <= policy.slo_ms:
            if best is None or r.throughput_ips > best.throughput_ips:
                best = r
    satisfied = best is not None
    if best is None:
        best = rows[0]
    return BatchPlan(
        model_id=policy.model_id,
        batch_size=best.batch_size,
        expected_latency_ms=best.latency(policy.percentile),
        expected_throughput_ips=best.throughput_ips,
        slo_satisfied=satisfied,
        derived_from=provenance,
    )


class Orchestrator:
    def __init__(self, cache: ProfileCache | None = None, engine=None):
        self.cache = cache if cache is not None else ProfileCache()
        self.engine = engine

    def put_profile(self, record: ProfileRecord) -> None:
        self.cache.put(record)

    def plan_batch(self, model_id: str, policy: SloPolicy, device_tag: str = "cpu-local") -> BatchPlan:
        rows = self.cache.records(model_id, device_tag)
        if not rows:
            raise NoProfile(f"no cached profile for ({model_id}, {device_tag})")
        return choose_batch(rows, policy)

    def push_plan(self, plan: BatchPlan) -> None:
        if plan.batch_size < 1:
            raise OrchestratorError("plan batch_size must be >= 1")
        if self.engine is None:
            raise OrchestratorError("no data engine attached")
        self.engine.apply_plan(plan)
