"""``v2r`` command-line entry point.

Reports go to stdout as JSON; logs and human-readable messages go to
stderr. Each error family exits with its own code (see ``v2r.errors``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import socket
import sys
import threading

from . import bench as bench_mod
from .errors import EXIT_CODES, V2RError
from .executors import SyntheticLatency, HistogramEmbedding, build_executor, executor_config
from .matching import load_index, read_features
from .monitor import StatusPublisher, local_status
from .orchestrator import Orchestrator, ProfileCache, SloPolicy
from .profiler import DEFAULT_BATCH_SIZES, DEFAULT_DEVICE, profile_model, write_profile
from .registry import ModelManifest, ModelRegistry, TensorSpec

log = logging.getLogger("v2r")


def _home(args):
    return args.home or os.environ.get("V2R_HOME") or ".v2r"


def _registry(args):
    return ModelRegistry(os.path.join(_home(args), "registry"))


def _cache(args):
    os.makedirs(_home(args), exist_ok=True)
    return ProfileCache(os.path.join(_home(args), "profiles.jsonl"))


def parse_spec(text: str) -> TensorSpec:
    """``f32:batch,32,32,3`` -> TensorSpec."""
    dtype, _, dims = text.partition(":")
    parsed = []
    for d in filter(None, dims.split(",")):
        d = d.strip()
        parsed.append("batch" if d == "batch" else int(d))
    return TensorSpec(dtype, tuple(parsed))


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _emit(args, obj):
    if args.json:
        print(json.dumps(obj, separators=(",", ":"), sort_keys=True))
    else:
        print(json.dumps(obj, indent=2, sort_keys=True))


def _manifest_json(m: ModelManifest) -> dict:
    return m.to_record()


def load_executor(registry, model_id):
    manifest = registry.get_model(model_id)
    weights = registry.fetch_weights(manifest.weight_ref) if manifest.weight_ref else None
    return manifest, build_executor(manifest, weights)


def _image_geometry(manifest):
    dims = manifest.input_spec.item_dims
    if len(dims) == 3 and dims[2] == 3:
        return manifest.input_spec, (dims[0], dims[1])
    return None, None


# commands -------------------------------------------------------------------
def cmd_model_register(args):
    reg = _registry(args)
    if args.weights:
        with open(args.weights, "rb") as fh:
            weights = fh.read()
    elif args.config:
        cfg = json.loads(args.config)
        if cfg.get("kind") == "synthetic":
            ex = SyntheticLatency(cfg.get("a_ms", 8.0), cfg.get("s_ms", 0.5), cfg.get("q_ms", 0.05),
                                  cfg.get("jitter_frac", 0.0), cfg.get("seed", args.seed))
        else:
            ex = HistogramEmbedding(cfg.get("seed", args.seed), cfg.get("dim", 128))
        weights = executor_config(ex)
    else:
        weights = None
    manifest = ModelManifest(
        model_id=args.id,
        name=args.name or args.id,
        task=args.task,
        input_spec=parse_spec(args.input_spec),
        output_spec=parse_spec(args.output_spec),
    )
    _emit(args, _manifest_json(reg.register_model(manifest, weights)))


def cmd_model_list(args):
    _emit(args, [_manifest_json(m) for m in _registry(args).list_models()])


def cmd_profile(args):
    reg = _registry(args)
    _, executor = load_executor(reg, args.model)
    batches = _int_list(args.batches) if args.batches else list(DEFAULT_BATCH_SIZES)
    records = profile_model(args.model, executor, batches, warmup=args.warmup, iterations=args.iters,
                            device_tag=args.device, cache=_cache(args), seed=args.seed)
    if args.out:
        write_profile(args.out, records)
    _emit(args, [r.to_json() for r in records])


def cmd_plan(args):
    orch = Orchestrator(_cache(args))
    plan = orch.plan_batch(args.model, SloPolicy(args.model, args.slo_ms, args.percentile), args.device)
    _emit(args, plan.to_json())


def _wait_forever(handle):
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()
    handle.shutdown()


def cmd_serve(args):
    from .server import FeatureSink, ModelServer, parse_address

    reg = _registry(args)
    executors = {}
    for mid in filter(None, args.models.split(",")):
        _, executors[mid] = load_executor(reg, mid)
    sink = None
    if args.features_out:
        dims = {ex.output_dim for ex in executors.values() if ex.output_dim}
        if len(dims) == 1:
            sink = FeatureSink(args.features_out, dim=dims.pop())
        else:
            log.warning("feature sink needs exactly one feature dim among served models; disabled")
    server = ModelServer(executors, registry=reg, feature_sink=sink, workers=args.workers)
    handle = server.serve(parse_address(args.bind))
    host, port = handle.address
    worker_id = f"{socket.gethostname()}:{port}"
    publisher = StatusPublisher(
        server.monitor.publish_status,
        lambda: local_status(worker_id, inflight=server.inflight()),
        interval_s=args.publish_interval,
    ).start()
    print(f"serving {sorted(executors)} on {host}:{port}", file=sys.stderr, flush=True)
    _emit(args, {"bind": f"{host}:{port}", "models": sorted(executors)})
    sys.stdout.flush()
    try:
        _wait_forever(handle)
    finally:
        publisher.stop()


def _run_pipeline_cmd(args, mode):
    from .pipeline import PipelineConfig, run_pipeline
    from .server import FeatureSink, ModelServer, ServerClient

    if not os.path.exists(args.stream):
        raise FileNotFoundError(f"stream not found: {args.stream}")
    reg = _registry(args)
    manifest, executor = load_executor(reg, args.model)
    spec, target = _image_geometry(manifest)
    cfg = PipelineConfig(
        model_id=args.model,
        stream_path=args.stream,
        index_path=getattr(args, "index", None),
        mode=mode,
        keyframes=not args.all_frames,
        threshold=args.threshold,
        min_shot_len=args.min_shot_len,
        batch_size=args.batch_size,
        deadline_ms=args.deadline_ms,
        k=getattr(args, "k", 10),
        query_frames=tuple(getattr(args, "query_frame", None) or ()),
        target_hw=target,
        slo_ms=args.slo_ms,
        percentile=args.percentile,
    )
    orch = Orchestrator(_cache(args)) if args.slo_ms is not None else None
    if args.connect:
        with ServerClient(args.connect) as client:
            return run_pipeline(cfg, client=client, input_spec=spec, orchestrator=orch)
    sink = None
    if getattr(args, "features_out", None) and executor.output_dim:
        sink = FeatureSink(args.features_out, dim=executor.output_dim)
    server = ModelServer({args.model: executor}, registry=reg, feature_sink=sink)
    return run_pipeline(cfg, server=server, input_spec=spec, orchestrator=orch)


def cmd_ingest(args):
    _emit(args, _run_pipeline_cmd(args, "ingest"))


def cmd_pipeline(args):
    if args.mode == "query" and not args.query_frame:
        raise V2RError("--query-frame is required in query mode")
    _emit(args, _run_pipeline_cmd(args, args.mode))


def cmd_match(args):
    index = load_index(args.index)
    queries = read_features(args.query_file)
    results = [index.search(q, args.k, workers=args.workers).to_json() for q in queries]
    index.close()
    _emit(args, {"index": args.index, "size": index.size, "metric": index.metric, "k": args.k,
                 "results": results})


def cmd_status(args):
    from .server import ServerClient

    with ServerClient(args.master) as client:
        _emit(args, client.query_status(args.ttl_ms))


def cmd_bench(args):
    suite = args.suite
    if suite == "decode":
        report = bench_mod.bench_decode(frames=args.frames, seed=args.seed)
    elif suite == "keyframe":
        report = bench_mod.bench_keyframe(n_shots=args.shots, frames_per_shot=args.frames_per_shot,
                                          a_ms=args.a_ms, batch_size=args.batch_size, seed=args.seed)
    elif suite == "batchcurve":
        report = bench_mod.bench_batchcurve(a_ms=args.a_ms, max_batch=args.max_batch,
                                            iterations=args.iters, seed=args.seed)
    else:
        report = bench_mod.bench_match(n=args.n, dim=args.dim, k=args.k, queries=args.queries,
                                       workers=args.workers, seed=args.seed)
    if args.plot_dir:
        from .plotting import render

        report["figure"] = render(report, args.plot_dir)
    _emit(args, report)


def cmd_fixture(args):
    bench_mod.make_shot_stream(args.out, args.shots, args.frames_per_shot, args.height, args.width, args.seed)
    _emit(args, {"stream": args.out, "shots": args.shots, "frames": args.shots * args.frames_per_shot})


# parser ---------------------------------------------------------------------
def _add_stream_opts(p):
    p.add_argument("--stream", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=float, default=0.35)
    p.add_argument("--min-shot-len", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--deadline-ms", type=float, default=20.0)
    p.add_argument("--slo-ms", type=float, default=None, help="plan the batch size from cached profiles")
    p.add_argument("--percentile", choices=("p50", "p95", "p99"), default="p95")
    p.add_argument("--all-frames", action="store_true", help="infer every frame instead of keyframes")
    p.add_argument("--connect", help="host:port of a running server (default: in-process)")
    p.add_argument("--in-process", action="store_true", help="run the model in this process (default)")


def _global_flags(parser, suppress=False):
    # subcommands re-declare the globals without defaults so either position works
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--seed", type=int, **(kw or {"default": 0}))
    parser.add_argument("--json", action="store_true", help="compact single-line JSON output", **kw)
    parser.add_argument("--home", help="state directory (default $V2R_HOME or ./.v2r)", **kw)
    parser.add_argument("-v", "--verbose", action="store_true", **kw)


class _SubParsers(argparse._SubParsersAction):
    def add_parser(self, name, **kwargs):
        p = super().add_parser(name, **kwargs)
        _global_flags(p, suppress=True)
        return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="v2r", description=__doc__.splitlines()[0])
    parser.register("action", "parsers", _SubParsers)
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    model = sub.add_parser("model", help="model repository")
    model.register("action", "parsers", _SubParsers)
    msub = model.add_subparsers(dest="model_command", required=True)
    reg = msub.add_parser("register")
    reg.add_argument("--id", required=True)
    reg.add_argument("--name")
    reg.add_argument("--task", required=True, choices=("embedding", "detection", "classification", "synthetic"))
    reg.add_argument("--input-spec", default="f32:batch,32,32,3")
    reg.add_argument("--output-spec", default="f32:batch,128")
    g = reg.add_mutually_exclusive_group()
    g.add_argument("--weights", help="weight file to store")
    g.add_argument("--config", help="built-in executor config JSON, e.g. '{\"kind\":\"histogram\",\"dim\":128}'")
    reg.set_defaults(func=cmd_model_register)
    lst = msub.add_parser("list")
    lst.set_defaults(func=cmd_model_list)

    prof = sub.add_parser("profile", help="profile a model across batch sizes")
    prof.add_argument("--model", required=True)
    prof.add_argument("--batches")
    prof.add_argument("--iters", type=int, default=30)
    prof.add_argument("--warmup", type=int, default=3)
    prof.add_argument("--device", default=DEFAULT_DEVICE)
    prof.add_argument("--out")
    prof.set_defaults(func=cmd_profile)

    plan = sub.add_parser("plan", help="choose a batch size under a latency SLO")
    plan.add_argument("--model", required=True)
    plan.add_argument("--slo-ms", type=float, required=True)
    plan.add_argument("--percentile", choices=("p50", "p95", "p99"), default="p95")
    plan.add_argument("--device", default=DEFAULT_DEVICE)
    plan.set_defaults(func=cmd_plan)

    srv = sub.add_parser("serve", help="run the TCP model server")
    srv.add_argument("--bind", default="127.0.0.1:7878")
    srv.add_argument("--models", required=True)
    srv.add_argument("--features-out")
    srv.add_argument("--workers", type=int)
    srv.add_argument("--publish-interval", type=float, default=1.0, help="seconds between own status publishes")
    srv.set_defaults(func=cmd_serve)

    ing = sub.add_parser("ingest", help="detect shots and push keyframes through the model")
    _add_stream_opts(ing)
    ing.set_defaults(func=cmd_ingest)

    pipe = sub.add_parser("pipeline", help="end-to-end ingest -> infer -> index/search")
    _add_stream_opts(pipe)
    pipe.add_argument("--mode", choices=("index", "query"), default="index")
    pipe.add_argument("--index", required=True)
    pipe.add_argument("--query-frame", type=int, action="append")
    pipe.add_argument("--k", type=int, default=10)
    pipe.add_argument("--features-out")
    pipe.set_defaults(func=cmd_pipeline)

    match = sub.add_parser("match", help="top-k search of query features against an index")
    match.add_argument("--index", required=True)
    match.add_argument("--query-file", required=True)
    match.add_argument("--k", type=int, default=10)
    match.add_argument("--workers", type=int, default=1)
    match.set_defaults(func=cmd_match)

    st = sub.add_parser("status", help="cluster snapshot from a monitor master")
    st.add_argument("--master", default="127.0.0.1:7878")
    st.add_argument("--ttl-ms", type=int, default=3000)
    st.set_defaults(func=cmd_status)

    b = sub.add_parser("bench", help="performance suites")
    b.add_argument("suite", choices=bench_mod.SUITES)
    b.add_argument("--plot-dir", help="write a PNG figure of the results here")
    b.add_argument("--frames", type=int, default=2000)
    b.add_argument("--shots", type=int, default=3)
    b.add_argument("--frames-per-shot", type=int, default=30)
    b.add_argument("--a-ms", type=float, default=8.0)
    b.add_argument("--batch-size", type=int, default=8)
    b.add_argument("--max-batch", type=int, default=32)
    b.add_argument("--iters", type=int, default=10)
    b.add_argument("--n", type=int, default=100_000)
    b.add_argument("--dim", type=int, default=128)
    b.add_argument("--k", type=int, default=10)
    b.add_argument("--queries", type=int, default=50)
    b.add_argument("--workers", type=int, default=4)
    b.set_defaults(func=cmd_bench)

    fx = sub.add_parser("fixture", help="write a synthetic multi-shot HYF stream")
    fx.add_argument("--out", required=True)
    fx.add_argument("--shots", type=int, default=3)
    fx.add_argument("--frames-per-shot", type=int, default=30)
    fx.add_argument("--height", type=int, default=36)
    fx.add_argument("--width", type=int, default=64)
    fx.set_defaults(func=cmd_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except V2RError as exc:
        print(f"v2r: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"v2r: error: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"v2r: error: {exc}", file=sys.stderr)
        return EXIT_CODES["usage"]
    except ConnectionError as exc:
        print(f"v2r: error: {exc}", file=sys.stderr)
        return EXIT_CODES["server"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
