"""Exact top-k similarity search over feature vectors.

A flat index scans every stored vector per query. Cosine indexes store
L2-normalized rows and score by dot product (higher is better); ``l2``
indexes score by squared euclidean distance (lower is better). Ties are
always broken toward the smaller id, so results do not depend on how the
scan is sharded across workers.

On-disk layout (little-endian)::

    magic[4] version:u16 metric:u8 dim:u32 count:u64   (19-byte header)
    count × (id:u64, dim × f32)

``HYIX`` files hold an index; ``HYFV`` files use the same layout for a plain
feature log (metric byte 255).
"""

from __future__ import annotations

import math
import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadDimension,
    DimMismatch,
    DuplicateId,
    EmptyIndex,
    IndexBadMagic,
    MatchingError,
    TruncatedIndex,
    VersionMismatch,
    ZeroVector,
)

INDEX_MAGIC = b"HYIX"
FEATURE_MAGIC = b"HYFV"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHBIQ")
COUNT_OFFSET = 11
METRICS = {"cosine": 0, "l2": 1}
METRIC_NAMES = {v: k for k, v in METRICS.items()}
RAW_METRIC = 255


@dataclass
class FeatureVector:
    id: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other):
        return (
            isinstance(other, FeatureVector)
            and self.id == other.id
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass
class MatchResult:
    query_id: int
    neighbors: list = field(default_factory=list)
    metric: str = "cosine"

    @property
    def ids(self) -> list:
        return [i for i, _ in self.neighbors]

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "metric": self.metric,
            "neighbors": [{"id": i, "score": s} for i, s in self.neighbors],
        }


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])


def top_k(keys: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` smallest ``keys``; equal keys order by smaller id."""
    n = keys.shape[0]
    if n > k:
        kth = np.partition(keys, k - 1)[k - 1]
        cand = np.flatnonzero(keys <= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], keys[cand]))[:k]
    return cand[order]


class FlatIndex:
    """In-memory flat index.

    Adds publish a new ``(ids, vectors)`` snapshot; searches read whichever
    snapshot was current when they started and never take the write lock.
    """

    def __init__(self, dim: int, metric: str = "cosine"):
        if not isinstance(dim, int) or dim < 1:
            raise BadDimension(f"dim must be >= 1, got {dim!r}")
        if metric not in METRICS:
            raise MatchingError(f"unknown metric {metric!r}")
        self.dim = dim
        self.metric = metric
        self._ids_buf = np.empty(0, dtype=np.uint64)
        self._vec_buf = np.empty((0, dim), dtype=np.float32)
        self._n = 0
        self._id_set = set()
        self._snapshot = (self._ids_buf[:0], self._vec_buf[:0])
        self._lock = threading.Lock()
        self._pool = None
        self._pool_size = 0

    def __len__(self):
        return self._n

    @property
    def size(self) -> int:
        return self._n

    @property
    def ids(self) -> np.ndarray:
        return self._snapshot[0]

    @property
    def vectors(self) -> np.ndarray:
        return self._snapshot[1]

    def _prepare(self, values: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(values)):
            raise MatchingError("vector values must be finite")
        if self.metric == "cosine":
            v64 = values.astype(np.float64)
            norms = np.sqrt(np.einsum("ij,ij->i", v64, v64))
            if np.any(norms == 0.0):
                raise ZeroVector("cosine index rejects zero vectors")
            return (v64 / norms[:, None]).astype(np.float32)
        return values.astype(np.float32, copy=False)

    def add(self, vectors) -> int:
        vectors = list(vectors)
        if not vectors:
            return 0
        for v in vectors:
            if v.dim != self.dim:
                raise DimMismatch(f"vector {v.id} has dim {v.dim}, index dim {self.dim}")
        new_ids = [int(v.id) for v in vectors]
        mat = self._prepare(np.stack([v.values for v in vectors]))
        return self._add_arrays(np.asarray(new_ids, dtype=np.uint64), mat)

    def add_arrays(self, ids, values) -> int:
        """Bulk add from an id array and an ``n × dim`` matrix."""
        ids = np.asarray(ids, dtype=np.uint64).reshape(-1)
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 2 or values.shape[1] != self.dim:
            raise DimMismatch(f"expected n×{self.dim} matrix, got {values.shape}")
        if values.shape[0] != ids.shape[0]:
            raise MatchingError("ids and values disagree in length")
        return self._add_arrays(ids, self._prepare(values))

    def _add_arrays(self, ids, mat):
        m = ids.shape[0]
        with self._lock:
            id_list = ids.tolist()
            if len(set(id_list)) != m:
                raise DuplicateId("duplicate ids within one add")
            clash = self._id_set.intersection(id_list)
            if clash:
                raise DuplicateId(f"ids already present: {sorted(clash)[:5]}")
            need = self._n + m
            if need > self._ids_buf.shape[0]:
                cap = max(need, 2 * self._ids_buf.shape[0], 16)
                ids_buf = np.empty(cap, dtype=np.uint64)
                vec_buf = np.empty((cap, self.dim), dtype=np.float32)
                ids_buf[: self._n] = self._ids_buf[: self._n]
                vec_buf[: self._n] = self._vec_buf[: self._n]
                self._ids_buf, self._vec_buf = ids_buf, vec_buf
            # rows below _n are never rewritten, so old snapshots stay valid
            self._ids_buf[self._n:need] = ids
            self._vec_buf[self._n:need] = mat
            self._n = need
            self._id_set.update(id_list)
            self._snapshot = (self._ids_buf[:need], self._vec_buf[:need])
        return m

    def _query_vector(self, query) -> np.ndarray:
        q = np.asarray(query.values if isinstance(query, FeatureVector) else query, dtype=np.float32).reshape(-1)
        if q.shape[0] != self.dim:
            raise DimMismatch(f"query dim {q.shape[0]}, index dim {self.dim}")
        if not np.all(np.isfinite(q)):
            raise MatchingError("query values must be finite")
        if self.metric == "cosine":
            q64 = q.astype(np.float64)
            norm = math.sqrt(float(q64 @ q64))
            if norm == 0.0:
                raise ZeroVector("zero query vector")
            q = (q64 / norm).astype(np.float32)
        return q

    def _scores(self, vecs, q):
        # einsum reduces each row on its own, so a row's score does not depend
        # on which shard it lands in (BLAS gemv blocking does)
        if self.metric == "cosine":
            return np.einsum("ij,j->i", vecs, q)
        diff = vecs - q
        return np.einsum("ij,ij->i", diff, diff)

    def score_all(self, query) -> np.ndarray:
        """Scores of every stored row against ``query``, in storage order."""
        return self._scores(self._snapshot[1], self._query_vector(query))

    def _shard_best(self, ids, vecs, q, k):
        scores = self._scores(vecs, q)
        keys = -scores if self.metric == "cosine" else scores
        pos = top_k(keys, ids, k)
        return ids[pos], scores[pos], keys[pos]

    def _get_pool(self, workers):
        if self._pool is None or self._pool_size != workers:
            if self._pool is not None:
                self._pool.shutdown(wait=False)
            self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="v2r-scan")
            self._pool_size = workers
        return self._pool

    def search(self, query, k: int, workers: int = 1) -> MatchResult:
        if k < 1:
            raise MatchingError(f"k must be >= 1, got {k}")
        q = self._query_vector(query)
        ids, vecs = self._snapshot
        n = ids.shape[0]
        if n == 0:
            raise EmptyIndex("search on empty index")
        qid = int(query.id) if isinstance(query, FeatureVector) else 0
        if workers <= 1 or n < 2 * workers:
            best_ids, best_scores, _ = self._shard_best(ids, vecs, q, k)
        else:
            bounds = np.linspace(0, n, workers + 1, dtype=np.int64)
            pool = self._get_pool(workers)
            parts = list(pool.map(
                lambda i: self._shard_best(ids[bounds[i]:bounds[i + 1]], vecs[bounds[i]:bounds[i + 1]], q, k),
                range(workers),
            ))
            all_ids = np.concatenate([p[0] for p in parts])
            all_scores = np.concatenate([p[1] for p in parts])
            all_keys = np.concatenate([p[2] for p in parts])
            pos = top_k(all_keys, all_ids, k)
            best_ids, best_scores = all_ids[pos], all_scores[pos]
        neighbors = [(int(i), float(s)) for i, s in zip(best_ids.tolist(), best_scores.tolist())]
        return MatchResult(qid, neighbors, self.metric)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __eq__(self, other):
        if not isinstance(other, FlatIndex):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.metric == other.metric
            and np.array_equal(self.ids, other.ids)
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


def build_index(dim: int, metric: str = "cosine") -> FlatIndex:
    return FlatIndex(dim, metric)


def _write_records(fh, ids, vecs, dim):
    rec = np.empty(ids.shape[0], dtype=_record_dtype(dim))
    rec["id"] = ids
    rec["v"] = vecs
    fh.write(rec.tobytes())


def _read_file(path, magic, bad_magic_exc=IndexBadMagic):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != magic:
        raise bad_magic_exc(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    if len(data) < HEADER.size:
        raise TruncatedIndex(f"{path}: header truncated")
    _, version, metric, dim, count = HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {FORMAT_VERSION}")
    if dim < 1:
        raise BadDimension(f"{path}: dim {dim}")
    rdt = _record_dtype(dim)
    need = HEADER.size + count * rdt.itemsize
    if len(data) < need:
        have = (len(data) - HEADER.size) // rdt.itemsize
        raise TruncatedIndex(f"{path}: header promises {count} records, only {have} complete")
    rec = np.frombuffer(data, dtype=rdt, count=count, offset=HEADER.size)
    return metric, dim, rec["id"].copy(), rec["v"].copy()


def save_index(index: FlatIndex, path) -> None:
    ids, vecs = index.ids, index.vectors
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(HEADER.pack(INDEX_MAGIC, FORMAT_VERSION, METRICS[index.metric], index.dim, ids.shape[0]))
        _write_records(fh, ids, vecs, index.dim)
    os.replace(tmp, path)


def load_index(path) -> FlatIndex:
    metric, dim, ids, vecs = _read_file(path, INDEX_MAGIC)
    if metric not in METRIC_NAMES:
        raise MatchingError(f"{path}: unknown metric code {metric}")
    index = FlatIndex(dim, METRIC_NAMES[metric])
    if ids.shape[0]:
        # stored rows are already normalized; load them bit-exactly
        index._add_arrays(ids, vecs)
    return index


def write_features(path, vectors, dim: int | None = None) -> None:
    vectors = list(vectors)
    if dim is None:
        if not vectors:
            raise BadDimension("dim required for an empty feature file")
        dim = vectors[0].dim
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, RAW_METRIC, dim, len(vectors)))
        if vectors:
            for v in vectors:
                if v.dim != dim:
                    raise DimMismatch(f"vector {v.id} has dim {v.dim}, file dim {dim}")
            _write_records(fh, np.array([v.id for v in vectors], dtype=np.uint64),
                           np.stack([v.values for v in vectors]), dim)


def read_features(path) -> list:
    _, dim, ids, vecs = _read_file(path, FEATURE_MAGIC)
    return [FeatureVector(int(i), v) for i, v in zip(ids.tolist(), vecs)]


class FeatureLog:
    """Append-only ``HYFV`` file; the header count is rewritten after each append."""

    def __init__(self, path, dim: int):
        self.path = path
        self.dim = dim
        self._lock = threading.Lock()
        if os.path.exists(path):
            _, fdim, ids, _ = _read_file(path, FEATURE_MAGIC)
            if fdim != dim:
                raise DimMismatch(f"{path}: file dim {fdim}, expected {dim}")
            self.count = ids.shape[0]
            with open(path, "rb+") as fh:
                fh.truncate(HEADER.size + self.count * _record_dtype(dim).itemsize)
        else:
            write_features(path, [], dim=dim)
            self.count = 0

    def append(self, vectors) -> None:
        vectors = list(vectors)
        if not vectors:
            return
        for v in vectors:
            if v.dim != self.dim:
                raise DimMismatch(f"vector {v.id} has dim {v.dim}, log dim {self.dim}")
        with self._lock:
            with open(self.path, "rb+") as fh:
                fh.seek(0, os.SEEK_END)
                _write_records(fh, np.array([v.id for v in vectors], dtype=np.uint64),
                               np.stack([v.values for v in vectors]), self.dim)
                self.count += len(vectors)
                fh.seek(COUNT_OFFSET)
                fh.write(struct.pack("<Q", self.count))
