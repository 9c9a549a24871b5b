"""Acceptance criteria, one test each, at the stated tolerances.

Every test prints a single ``[criterion N] PASS|FAIL ...`` line (visible
without ``-s``) and then asserts on the same condition.
"""

import os
import statistics
import threading
import time

import numpy as np

from fuzzgen import GENERATORS
from v2r.bench import bench_decode, bench_keyframe, make_shot_stream
from v2r.data_engine import DataEngine, InferenceRequest, ManualClock, replay, run_until_idle
from v2r.errors import MalformedBody
from v2r.executors import HistogramEmbedding, SyntheticLatency
from v2r.matching import FlatIndex
from v2r.monitor import MonitorMaster, WorkerStatus
from v2r.orchestrator import BatchPlan, Orchestrator, SloPolicy, choose_batch
from v2r.pipeline import PipelineConfig, run_pipeline
from v2r.profiler import ProfileRecord, profile_model
from v2r.server import ModelServer, ServerClient


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}", flush=True)
    assert ok, detail


def test_criterion_1_matching_latency(capsys):
    rng = np.random.default_rng(2024)
    n, dim, k = 100_000, 128, 10
    data = rng.standard_normal((n, dim), dtype=np.float32)
    index = FlatIndex(dim, "cosine")
    index.add_arrays(np.arange(n), data)
    queries = rng.standard_normal((50, dim), dtype=np.float32)

    stored = index.vectors.astype(np.float64)
    agree = 0
    for q in queries:
        qn = (q / np.linalg.norm(q.astype(np.float64))).astype(np.float32).astype(np.float64)
        keys = -(stored @ qn)
        want = np.lexsort((np.arange(n), keys))[:k].tolist()
        agree += index.search(q, k).ids == want and index.search(q, k, workers=4).ids == want

    def mean_ms(workers):
        index.search(queries[0], k, workers=workers)
        lat = []
        for q in queries:
            t0 = time.perf_counter()
            index.search(q, k, workers=workers)
            lat.append((time.perf_counter() - t0) * 1000)
        return statistics.fmean(lat)

    single, pool = mean_ms(1), mean_ms(4)
    index.close()
    ok = agree == 50 and single <= 50.0 and pool <= 15.0
    verdict(capsys, 1, ok, f"oracle agreement {agree}/50, single {single:.2f} ms (<=50), "
                           f"pool(4) {pool:.2f} ms (<=15), cpus={os.cpu_count()}")


def test_criterion_2_batch_tradeoff(capsys):
    ex = SyntheticLatency(8.0, 0.5, 0.05, 0.0)
    recs = profile_model("synthetic", ex, list(range(1, 33)), warmup=1, iterations=10)
    means = [r.lat_mean_ms for r in recs]
    monotone = all(b >= a for a, b in zip(means, means[1:]))
    peak = max(recs, key=lambda r: r.throughput_ips).batch_size
    interior = 1 < peak < 32
    ok = monotone and interior and abs(peak - 13) <= 2
    verdict(capsys, 2, ok, f"mean latency non-decreasing={monotone}, throughput peak at b={peak} "
                           f"(want 13+-2, analytic {np.sqrt(8 / 0.05):.1f})")


def test_criterion_3_keyframe_speedup(capsys):
    rep = bench_keyframe(n_shots=30, frames_per_shot=100, a_ms=8.0)
    kf, allf = rep["keyframe"]["inference_requests"], rep["all_frames"]["inference_requests"]
    ok = kf == 30 and allf == 3000 and rep["speedup"] >= 10.0
    verdict(capsys, 3, ok, f"requests {kf} vs {allf}, wall {rep['keyframe']['wall_s']:.3f} s vs "
                           f"{rep['all_frames']['wall_s']:.3f} s, speedup {rep['speedup']:.1f}x (>=10)")


def test_criterion_4_scan_throughput(capsys, tmp_path):
    rep = bench_decode(frames=2000, height=180, width=320, workdir=str(tmp_path))
    ok = rep["fps"] >= 2000
    verdict(capsys, 4, ok, f"read_stream + histograms at 320x180 rgb8: {rep['fps']:.0f} fps (>=2000)")


def _oracle_plan(rows, policy):
    best = None
    for r in rows:
        if r.latency(policy.percentile) > policy.slo_ms:
            continue
        if best is None or r.throughput_ips > best.throughput_ips or (
            r.throughput_ips == best.throughput_ips and r.batch_size < best.batch_size
        ):
            best = r
    if best is None:
        return min(r.batch_size for r in rows), False
    return best.batch_size, True


def test_criterion_5_orchestrator_optimality(capsys):
    rng = np.random.default_rng(5)
    tables = agree = fallbacks = 0
    for t in range(300):
        m = int(rng.integers(5, 21))
        sizes = np.sort(rng.choice(np.arange(1, 257), m, replace=False))
        rows = []
        for b in sizes:
            p50 = float(rng.uniform(1, 150))
            p95 = p50 * float(rng.uniform(1, 1.5))
            ips = float(rng.choice([100.0, 200.0, rng.uniform(10, 5000)]))  # repeats force ties
            rows.append(ProfileRecord("m", "cpu-local", int(b), b / ips * 1000, p50, p95, p95 * 1.2, ips, 30, t))
        pct = str(rng.choice(["p50", "p95", "p99"]))
        lowest = min(r.latency(pct) for r in rows)
        # every third table has an SLO below every row
        slo = lowest * 0.5 if t % 3 == 0 else float(rng.uniform(lowest, 250))
        policy = SloPolicy("m", slo, pct)
        plan = choose_batch(rows, policy)
        want = _oracle_plan(rows, policy)
        tables += 1
        agree += (plan.batch_size, plan.slo_satisfied) == want
        fallbacks += not want[1]
    ok = agree == tables and tables >= 100 and fallbacks > 0
    verdict(capsys, 5, ok, f"{agree}/{tables} tables match the exhaustive oracle, {fallbacks} forced fallbacks")


def test_criterion_6_batching_contract(capsys):
    clock = ManualClock(0)
    engine = DataEngine(clock)
    batches = []
    engine.open_queue("m", 1, batches.append)
    orch = Orchestrator(engine=engine)
    q = engine.queue("m")
    rng = np.random.default_rng(6)
    # integer-ms arrivals keep wait arithmetic exact
    arrivals = np.cumsum(rng.integers(0, 7, 600)).tolist()
    switch_at = arrivals[300]
    active = {"b": 8}

    def switch():
        active["b"] = 4
        orch.push_plan(BatchPlan("m", 4, 20.0, 100.0, True))

    events = [(0, lambda: orch.push_plan(BatchPlan("m", 8, 40.0, 200.0, True)))]
    events += [(t, (lambda i=i: engine.submit(InferenceRequest(i, "m", np.zeros(1, np.float32), 20.0))))
               for i, t in enumerate(arrivals)]
    events.append((switch_at, switch))
    replay(q, clock, events)
    run_until_idle(q, clock)
    oversize = sum(len(b) > (8 if b.formed_at < switch_at else 4) or len(b) > b.plan_batch_size for b in batches)
    late = sum(b.max_wait_ms() > 20.0 for b in batches)
    order = [r for b in batches for r in b.request_ids]
    fifo = order == list(range(600))
    triggers = sorted({b.trigger for b in batches})
    ok = oversize == 0 and late == 0 and fifo
    verdict(capsys, 6, ok, f"{len(batches)} batches ({'/'.join(triggers)}), oversize={oversize}, "
                           f"deadline violations={late}, FIFO={fifo}")


def test_criterion_7_protocol_round_trip(capsys):
    rng = np.random.default_rng(7)
    round_trips = 0
    bodies = []
    for msg_type, (gen, enc, dec, eq) in sorted(GENERATORS.items()):
        for _ in range(1000):
            msg = gen(rng)
            body = enc(msg)
            round_trips += eq(dec(body), msg)
            bodies.append((body, dec))
    caught = 0
    for i in rng.choice(len(bodies), 100, replace=False):
        body, dec = bodies[i]
        cut = int(rng.integers(0, len(body)))
        try:
            dec(body[:cut])
        except MalformedBody:
            caught += 1
    ok = round_trips == 3000 and caught == 100
    verdict(capsys, 7, ok, f"{round_trips}/3000 fuzzed messages round-trip, {caught}/100 truncation mutants "
                           f"raise MalformedBody")


def test_criterion_8_self_match(capsys, tmp_path):
    stream = make_shot_stream(str(tmp_path / "three.hyf"))
    index = str(tmp_path / "shots.hyix")
    server = ModelServer({"emb": HistogramEmbedding()})
    rep = run_pipeline(PipelineConfig("emb", stream, index, mode="index"), server=server)
    shot2 = rep["shots"][1]
    qframe = (shot2["start"] + shot2["end"]) // 2
    rep = run_pipeline(PipelineConfig("emb", stream, index, mode="query", query_frames=(qframe,), k=3),
                       server=server)
    top_id, score = rep["matches"][0]["neighbors"][0]["id"], rep["matches"][0]["neighbors"][0]["score"]
    # feature ids follow shot order from 1, so shot 2 is id 2
    ok = top_id == 2 and score >= 0.99
    verdict(capsys, 8, ok, f"query frame {qframe} -> rank-1 id {top_id} with cosine {score:.6f} (want id 2, >=0.99)")


def test_criterion_9_monitor(capsys):
    clock = ManualClock(0)
    m = MonitorMaster(clock=lambda: int(clock()), ttl_ms=3000)
    fixture = [("fresh", 9_500, False), ("edge", 7_000, False), ("stale", 6_999, True)]
    for wid, t, _ in sorted(fixture, key=lambda f: f[1]):
        clock.set(t)
        m.publish_status(WorkerStatus(wid, t, 10.0, 1 << 20))
    clock.set(10_000)
    flags = {w: e.stale for w, e in m.snapshot().workers.items()}
    exact = flags == {w: s for w, _, s in fixture}

    server = ModelServer({})
    n_clients, per_client = 4, 5000
    with server.serve() as h:
        def pump(i):
            with ServerClient(h.address) as c:
                for t in range(per_client):
                    c.publish_status(WorkerStatus(f"w{i}", t, 5.0, 1 << 20, {"m": t % 7}))
                c.query_status()  # replies after every earlier publish on this connection

        threads = [threading.Thread(target=pump, args=(i,)) for i in range(n_clients)]
        t0 = time.perf_counter()
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        rate = n_clients * per_client / (time.perf_counter() - t0)
    mon = server.monitor
    ok = exact and rate >= 10_000 and mon.dropped == 0 and mon.accepted == n_clients * per_client
    verdict(capsys, 9, ok, f"stale flags {flags} exact={exact}; TCP ingest {rate:.0f} publishes/s (>=10000), "
                           f"accepted={mon.accepted}, dropped={mon.dropped}")
