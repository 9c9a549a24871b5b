"""Model executors standing in for real networks.

Two deterministic built-ins are provided: :class:`SyntheticLatency`, whose
batch latency follows ``a + s*b + q*b**2`` milliseconds, and
:class:`HistogramEmbedding`, which projects colour histograms through a
splitmix64-seeded matrix into a unit-norm feature vector.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import BadDimensions, BatchTooLarge, ShapeMismatch
from .histogram import channel_histograms
from .matching import FeatureVector
from .registry import TensorSpec

DEFAULT_MAX_BATCH = 256
MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


@dataclass
class ExecutorOutput:
    request_id: int
    predictions: list = field(default_factory=list)
    feature: FeatureVector | None = None


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of the splitmix64 stream seeded with ``seed``."""
    with np.errstate(over="ignore"):
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(seed & MASK64) + steps * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


@lru_cache(maxsize=32)
def projection_matrix(seed: int, dim: int, rows: int = 96) -> np.ndarray:
    """Row-major ``rows × dim`` f32 matrix with entries in [-1, 1)."""
    raw = splitmix64(seed, rows * dim)
    top24 = (raw >> np.uint64(40)).astype(np.float32)
    vals = top24 / np.float32(1 << 24) * np.float32(2.0) - np.float32(1.0)
    m = vals.reshape(rows, dim)
    m.setflags(write=False)
    return m


def _as_u8_image(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    if image.dtype == np.float32:
        # preprocessed tensors hold exact v/255 values
        return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    raise BadDimensions(f"unsupported image dtype {image.dtype}")


def embed_histogram(image: np.ndarray, seed: int, dim: int) -> np.ndarray:
    if dim < 8:
        raise BadDimensions(f"dim must be >= 8, got {dim}")
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] < 1 or image.shape[1] < 1:
        raise BadDimensions(f"expected H×W×3 image, got shape {image.shape}")
    hist = channel_histograms(_as_u8_image(image)).reshape(-1)
    proj = hist @ projection_matrix(seed, dim).astype(np.float64)
    norm = np.sqrt(proj @ proj)
    if norm == 0.0:
        raise BadDimensions("projection collapsed to the zero vector")
    return (proj / norm).astype(np.float32)


class Executor:
    """Base contract: validate a batch, run it, return one output per item."""

    output_dim: int | None = None

    def __init__(self, input_spec: TensorSpec | None = None, max_batch: int = DEFAULT_MAX_BATCH):
        self.input_spec = input_spec
        self.max_batch = max_batch

    def check_batch(self, batch):
        if len(batch) == 0:
            raise ShapeMismatch("empty batch")
        if len(batch) > self.max_batch:
            raise BatchTooLarge(f"batch of {len(batch)} exceeds max {self.max_batch}")
        if self.input_spec is None:
            return
        want = {"f32": np.float32, "u8": np.uint8}[self.input_spec.dtype]
        for i, t in enumerate(batch):
            if t.dtype != want or tuple(t.shape) != self.input_spec.item_dims:
                raise ShapeMismatch(
                    f"item {i}: got {t.dtype}{tuple(t.shape)}, "
                    f"want {self.input_spec.dtype}{self.input_spec.item_dims}"
                )

    def execute(self, batch, request_ids=None) -> list:
        self.check_batch(batch)
        ids = list(range(len(batch))) if request_ids is None else list(request_ids)
        if len(ids) != len(batch):
            raise ShapeMismatch("request_ids length differs from batch length")
        return self._run(batch, ids)

    def _run(self, batch, ids):
        raise NotImplementedError

    def sample_input(self, rng: np.random.Generator) -> np.ndarray:
        dims = self.input_spec.item_dims if self.input_spec else (1,)
        if self.input_spec is not None and self.input_spec.dtype == "u8":
            return rng.integers(0, 256, size=dims, dtype=np.uint8)
        return rng.random(dims, dtype=np.float32)


class SyntheticLatency(Executor):
    def __init__(self, a_ms: float, s_ms: float = 0.0, q_ms: float = 0.0, jitter_frac: float = 0.0,
                 seed: int = 0, input_spec=None, max_batch=DEFAULT_MAX_BATCH):
        if not a_ms > 0:
            raise ValueError("a_ms must be > 0")
        if s_ms < 0 or q_ms < 0:
            raise ValueError("s_ms and q_ms must be >= 0")
        if not 0.0 <= jitter_frac <= 0.5:
            raise ValueError("jitter_frac must be in [0, 0.5]")
        super().__init__(input_spec, max_batch)
        self.a_ms, self.s_ms, self.q_ms = float(a_ms), float(s_ms), float(q_ms)
        self.jitter_frac = float(jitter_frac)
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._rng_lock = threading.Lock()

    def model_ms(self, b: int) -> float:
        return self.a_ms + self.s_ms * b + self.q_ms * b * b

    def _run(self, batch, ids):
        delay = self.model_ms(len(batch))
        if self.jitter_frac:
            with self._rng_lock:
                delay *= 1.0 + self._rng.uniform(-self.jitter_frac, self.jitter_frac)
        time.sleep(delay / 1000.0)
        return [ExecutorOutput(rid, [("ok", 1.0)], None) for rid in ids]


class HistogramEmbedding(Executor):
    def __init__(self, seed: int = 7, dim: int = 128, input_spec=None, max_batch=DEFAULT_MAX_BATCH):
        if dim < 8:
            raise BadDimensions(f"dim must be >= 8, got {dim}")
        super().__init__(input_spec, max_batch)
        self.seed = seed
        self.dim = dim
        self.output_dim = dim
        projection_matrix(seed, dim)  # warm the cache

    def _run(self, batch, ids):
        outs = []
        for rid, img in zip(ids, batch):
            vec = embed_histogram(img, self.seed, self.dim)
            u8 = _as_u8_image(img)
            means = u8.reshape(-1, 3).mean(axis=0) / 255.0
            preds = sorted(
                ((name, float(m)) for name, m in zip(("red", "green", "blue"), means)),
                key=lambda p: -p[1],
            )
            outs.append(ExecutorOutput(rid, preds, FeatureVector(rid, vec)))
        return outs

    def sample_input(self, rng):
        dims = self.input_spec.item_dims if self.input_spec else (32, 32, 3)
        if self.input_spec is not None and self.input_spec.dtype == "f32":
            return (rng.integers(0, 256, size=dims) / 255.0).astype(np.float32)
        return rng.integers(0, 256, size=dims, dtype=np.uint8)


def executor_config(executor) -> bytes:
    """Serialize a built-in executor's parameters as its weight blob."""
    if isinstance(executor, SyntheticLatency):
        cfg = {"kind": "synthetic", "a_ms": executor.a_ms, "s_ms": executor.s_ms,
               "q_ms": executor.q_ms, "jitter_frac": executor.jitter_frac, "seed": executor.seed}
    elif isinstance(executor, HistogramEmbedding):
        cfg = {"kind": "histogram", "seed": executor.seed, "dim": executor.dim}
    else:
        raise TypeError(f"no config form for {type(executor).__name__}")
    return json.dumps(cfg, sort_keys=True).encode()


def build_executor(manifest, weights: bytes | None) -> Executor:
    """Instantiate the built-in executor described by a manifest and its blob."""
    cfg = json.loads(weights.decode()) if weights else {}
    kind = cfg.get("kind") or ("synthetic" if manifest.task == "synthetic" else "histogram")
    if kind == "synthetic":
        return SyntheticLatency(
            cfg.get("a_ms", 8.0), cfg.get("s_ms", 0.5), cfg.get("q_ms", 0.05),
            cfg.get("jitter_frac", 0.0), cfg.get("seed", 0),
        )
    if kind == "histogram":
        return HistogramEmbedding(cfg.get("seed", 7), cfg.get("dim", 128), input_spec=manifest.input_spec)
    raise ValueError(f"unknown executor kind {kind!r}")
