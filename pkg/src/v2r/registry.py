"""Two-layer model repository.

Metadata lives in an append-only ``catalog.jsonl``; weight bytes live in a
content-addressed blob store under ``blobs/<first2hex>/<sha256>``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import CorruptBlob, DuplicateVersion, InvalidManifest, NotFound, StorageFailure

log = logging.getLogger(__name__)

MODEL_ID_RE = re.compile(r"[a-z0-9_-]{1,64}")
HEX64_RE = re.compile(r"[0-9a-f]{64}")
TASKS = ("embedding", "detection", "classification", "synthetic")
DTYPES = ("f32", "u8")
BATCH = "batch"

CATALOG_KEYS = (
    "model_id",
    "name",
    "task",
    "input_spec",
    "output_spec",
    "weight_ref",
    "version",
    "registered_at",
    "tombstone",
)


@dataclass(frozen=True)
class TensorSpec:
    dtype: str
    dims: tuple

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise InvalidManifest(f"unknown dtype {self.dtype!r}")
        dims = tuple(self.dims)
        object.__setattr__(self, "dims", dims)
        if sum(1 for d in dims if d == BATCH) > 1:
            raise InvalidManifest("at most one batch dim allowed")
        for d in dims:
            if d == BATCH:
                continue
            if isinstance(d, bool) or not isinstance(d, int) or d < 1:
                raise InvalidManifest(f"bad dim {d!r}")

    @property
    def item_dims(self) -> tuple:
        """Dims of a single item (the batch dim removed)."""
        return tuple(d for d in self.dims if d != BATCH)

    def accepts(self, shape, dtype) -> bool:
        return dtype == self.dtype and tuple(shape) == self.item_dims

    def to_json(self) -> dict:
        return {"dtype": self.dtype, "dims": list(self.dims)}

    @classmethod
    def from_json(cls, obj) -> "TensorSpec":
        try:
            return cls(obj["dtype"], tuple(obj["dims"]))
        except (KeyError, TypeError) as exc:
            raise InvalidManifest(f"bad tensor spec {obj!r}") from exc


@dataclass(frozen=True)
class ModelManifest:
    model_id: str
    name: str
    task: str
    input_spec: TensorSpec
    output_spec: TensorSpec
    weight_ref: str = ""
    version: int = 0
    registered_at: int = 0
    tombstone: bool = False

    def validate(self):
        if not isinstance(self.model_id, str) or not MODEL_ID_RE.fullmatch(self.model_id):
            raise InvalidManifest(f"invalid model_id {self.model_id!r}")
        if self.task not in TASKS:
            raise InvalidManifest(f"invalid task {self.task!r}")
        if not isinstance(self.input_spec, TensorSpec) or not isinstance(self.output_spec, TensorSpec):
            raise InvalidManifest("input_spec/output_spec must be TensorSpec")
        if self.weight_ref and not HEX64_RE.fullmatch(self.weight_ref):
            raise InvalidManifest(f"invalid weight_ref {self.weight_ref!r}")

    def to_record(self) -> dict:
        return {
            "model_id": self.model_id,
            "name": self.name,
            "task": self.task,
            "input_spec": self.input_spec.to_json(),
            "output_spec": self.output_spec.to_json(),
            "weight_ref": self.weight_ref,
            "version": self.version,
            "registered_at": self.registered_at,
            "tombstone": self.tombstone,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ModelManifest":
        if set(rec) != set(CATALOG_KEYS):
            raise InvalidManifest(f"catalog record keys {sorted(rec)} do not match schema")
        return cls(
            model_id=rec["model_id"],
            name=rec["name"],
            task=rec["task"],
            input_spec=TensorSpec.from_json(rec["input_spec"]),
            output_spec=TensorSpec.from_json(rec["output_spec"]),
            weight_ref=rec["weight_ref"],
            version=int(rec["version"]),
            registered_at=int(rec["registered_at"]),
            tombstone=bool(rec["tombstone"]),
        )


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _now_ms() -> int:
    return int(time.time() * 1000)


class BlobStore:
    """Content-addressed, write-once blob files."""

    def __init__(self, root):
        self.root = Path(root)

    def path_for(self, ref: str) -> Path:
        return self.root / ref[:2] / ref

    def put(self, data: bytes) -> str:
        ref = content_hash(data)
        path = self.path_for(ref)
        if path.exists():
            return ref
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except OSError as exc:
            raise StorageFailure(f"cannot store blob {ref}: {exc}") from exc
        return ref

    def exists(self, ref: str) -> bool:
        return self.path_for(ref).is_file()

    def get(self, ref: str) -> bytes:
        if not isinstance(ref, str) or not HEX64_RE.fullmatch(ref):
            raise NotFound(f"not a blob reference: {ref!r}")
        path = self.path_for(ref)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise NotFound(f"blob {ref} not found") from None
        if content_hash(data) != ref:
            raise CorruptBlob(f"blob {ref} fails hash verification")
        return data


class ModelRegistry:
    """Catalog + blob store rooted at one directory.

    Writers are serialized by a lock; readers work from an immutable
    snapshot tuple that is swapped after every append.
    """

    def __init__(self, root, clock=_now_ms):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.catalog_path = self.root / "catalog.jsonl"
        self.blobs = BlobStore(self.root / "blobs")
        self._clock = clock
        self._write_lock = threading.Lock()
        self._records: tuple = tuple(self._load())

    def _load(self):
        if not self.catalog_path.exists():
            return []
        records = []
        with open(self.catalog_path, "rb") as fh:
            lines = fh.read().split(b"\n")
        for lineno, raw in enumerate(lines, 1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw.decode("utf-8"))
                records.append(ModelManifest.from_record(rec))
            except (ValueError, InvalidManifest) as exc:
                if lineno == len(lines) or (lineno == len(lines) - 1 and not lines[-1]):
                    log.warning("skipping torn catalog line %d in %s: %s", lineno, self.catalog_path, exc)
                    continue
                raise StorageFailure(f"corrupt catalog line {lineno}: {exc}") from exc
        return records

    def reload(self):
        with self._write_lock:
            self._records = tuple(self._load())

    def records(self) -> tuple:
        """All catalog records in registration order, tombstones included."""
        return self._records

    def _append(self, manifest: ModelManifest):
        line = json.dumps(manifest.to_record(), separators=(",", ":"), sort_keys=False) + "\n"
        try:
            self._repair_tail()
            with open(self.catalog_path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise StorageFailure(f"cannot append to catalog: {exc}") from exc
        self._records = self._records + (manifest,)

    def _repair_tail(self):
        # drop a torn (never acknowledged) final line before appending
        if not self.catalog_path.exists():
            return
        with open(self.catalog_path, "rb+") as fh:
            data = fh.read()
            if not data or data.endswith(b"\n"):
                return
            cut = data.rfind(b"\n") + 1
            log.warning("truncating torn catalog tail (%d bytes)", len(data) - cut)
            fh.truncate(cut)

    def register_model(self, manifest: ModelManifest, weights: bytes | None = None) -> ModelManifest:
        manifest.validate()
        with self._write_lock:
            prior = [m.version for m in self._records if m.model_id == manifest.model_id]
            version = max(prior, default=0) + 1
            if manifest.version and manifest.version != version:
                if manifest.version in prior:
                    raise DuplicateVersion(f"{manifest.model_id} v{manifest.version} already registered")
                raise InvalidManifest(f"version must be {version}, got {manifest.version}")
            weight_ref = self.blobs.put(weights) if weights is not None else ""
            out = replace(
                manifest,
                weight_ref=weight_ref,
                version=version,
                registered_at=self._clock(),
                tombstone=False,
            )
            self._append(out)
            return out

    def delete_model(self, model_id: str, version: int) -> ModelManifest:
        """Append a tombstone hiding ``version``; nothing is removed from disk."""
        with self._write_lock:
            target = self._find(model_id, version)
            tomb = replace(target, registered_at=self._clock(), tombstone=True)
            self._append(tomb)
            return tomb

    def _live(self):
        dead = {(m.model_id, m.version) for m in self._records if m.tombstone}
        return [m for m in self._records if not m.tombstone and (m.model_id, m.version) not in dead]

    def _find(self, model_id, version):
        live = [m for m in self._live() if m.model_id == model_id]
        if not live:
            raise NotFound(f"model {model_id!r} not found")
        if version == "latest":
            return max(live, key=lambda m: m.version)
        for m in live:
            if m.version == version:
                return m
        raise NotFound(f"model {model_id!r} version {version} not found")

    def get_model(self, model_id: str, version="latest") -> ModelManifest:
        return self._find(model_id, version)

    def list_models(self) -> list:
        latest = {}
        for m in self._live():
            if m.model_id not in latest or m.version > latest[m.model_id].version:
                latest[m.model_id] = m
        return sorted(latest.values(), key=lambda m: m.model_id)

    def fetch_weights(self, weight_ref: str) -> bytes:
        return self.blobs.get(weight_ref)
