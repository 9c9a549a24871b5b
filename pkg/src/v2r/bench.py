"""Benchmark suites backing the performance claims: raw-frame scan rate,
keyframe-vs-all-frames inference, the batch-size latency/throughput curve,
and flat-index search latency."""

from __future__ import annotations

import os
import statistics
import tempfile
import time

import numpy as np

from .data_engine import read_stream, write_stream
from .data_engine.synth import shot_colors, shot_frames
from .executors import SyntheticLatency
from .histogram import channel_histograms
from .matching import FlatIndex
from .pipeline import PipelineConfig, run_pipeline
from .profiler import percentile, profile_model
from .server import ModelServer

SUITES = ("decode", "keyframe", "batchcurve", "match")


def make_shot_stream(path, n_shots=3, frames_per_shot=30, height=36, width=64, seed=0):
    colors = shot_colors(n_shots, seed)
    write_stream(path, shot_frames(colors, frames_per_shot, height, width, seed=seed), "rgb8")
    return path


def scan_stream(path) -> int:
    """Read every frame and compute its histograms; returns frames scanned."""
    stream = read_stream(path)
    n = 0
    for frame in stream:
        channel_histograms(frame)
        n += 1
    return n


def bench_decode(frames=2000, height=180, width=320, seed=0, workdir=None) -> dict:
    rng = np.random.default_rng(seed)
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        path = os.path.join(tmp, "scan.hyf")
        base = rng.integers(0, 256, size=(8, height, width, 3), dtype=np.uint8)
        write_stream(path, (base[i % 8] for i in range(frames)), "rgb8")
        scan_stream(path)  # page the file in once
        t0 = time.perf_counter()
        n = scan_stream(path)
        elapsed = time.perf_counter() - t0
    return {
        "suite": "decode",
        "frames": n,
        "width": width,
        "height": height,
        "seconds": elapsed,
        "fps": n / elapsed,
    }


def bench_keyframe(n_shots=3, frames_per_shot=30, a_ms=8.0, s_ms=0.5, q_ms=0.05, batch_size=8,
                   seed=0, workdir=None) -> dict:
    executor = SyntheticLatency(a_ms, s_ms, q_ms, 0.0, seed=seed)
    server = ModelServer({"synthetic": executor})
    out = {"suite": "keyframe", "frames": n_shots * frames_per_shot, "batch_size": batch_size,
           "executor": {"a_ms": a_ms, "s_ms": s_ms, "q_ms": q_ms}}
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        path = make_shot_stream(os.path.join(tmp, "shots.hyf"), n_shots, frames_per_shot, seed=seed)
        for name, keyframes in (("keyframe", True), ("all_frames", False)):
            cfg = PipelineConfig("synthetic", path, mode="ingest", keyframes=keyframes, batch_size=batch_size)
            rep = run_pipeline(cfg, server=server)
            out[name] = {
                "inference_requests": rep["requests"],
                "batches": len(rep["batches"]),
                "shots": len(rep["shots"]) if keyframes else None,
                "wall_s": rep["timing"]["total_s"],
            }
    out["speedup"] = out["all_frames"]["wall_s"] / out["keyframe"]["wall_s"]
    return out


def bench_batchcurve(a_ms=8.0, s_ms=0.5, q_ms=0.05, max_batch=32, iterations=10, warmup=2, seed=0) -> dict:
    executor = SyntheticLatency(a_ms, s_ms, q_ms, 0.0, seed=seed)
    sizes = list(range(1, max_batch + 1))
    records = profile_model("synthetic", executor, sizes, warmup=warmup, iterations=iterations, seed=seed)
    best = max(records, key=lambda r: (r.throughput_ips, -r.batch_size))
    return {
        "suite": "batchcurve",
        "executor": {"a_ms": a_ms, "s_ms": s_ms, "q_ms": q_ms},
        "analytic_peak": (a_ms / q_ms) ** 0.5 if q_ms > 0 else None,
        "peak_batch_size": best.batch_size,
        "points": [
            {
                "batch_size": r.batch_size,
                "lat_mean_ms": r.lat_mean_ms,
                "lat_p95_ms": r.lat_p95_ms,
                "throughput_ips": r.throughput_ips,
                "model_ms": executor.model_ms(r.batch_size),
            }
            for r in records
        ],
    }


def bench_match(n=100_000, dim=128, k=10, queries=50, workers=4, seed=0) -> dict:
    rng = np.random.default_rng(seed)
    index = FlatIndex(dim, "cosine")
    index.add_arrays(np.arange(n, dtype=np.uint64), rng.standard_normal((n, dim), dtype=np.float32))
    qs = rng.standard_normal((queries, dim), dtype=np.float32)
    results = {}
    for label, w in (("single", 1), ("pool", workers)):
        index.search(qs[0], k, workers=w)  # warm up
        lat = []
        for q in qs:
            t0 = time.perf_counter()
            index.search(q, k, workers=w)
            lat.append((time.perf_counter() - t0) * 1000.0)
        results[label] = {
            "workers": w,
            "latency_ms": statistics.fmean(lat),
            "p50_ms": percentile(lat, 0.5),
            "p95_ms": percentile(lat, 0.95),
        }
    index.close()
    return {"suite": "match", "n": n, "dim": dim, "k": k, "queries": queries,
            "latency_ms": results["single"]["latency_ms"], **results}


def run_suite(name: str, **kw) -> dict:
    fn = {"decode": bench_decode, "keyframe": bench_keyframe,
          "batchcurve": bench_batchcurve, "match": bench_match}[name]
    return fn(**kw)
