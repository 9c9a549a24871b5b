import socket
import struct
import threading

import numpy as np
import pytest

from v2r.data_engine import InferenceBatch, InferenceRequest
from v2r.errors import BindFailure, ExecutorFailure, NotFound, RemoteError, UnknownModel
from v2r.executors import Executor, HistogramEmbedding, SyntheticLatency
from v2r.matching import build_index, read_features
from v2r.monitor import WorkerStatus
from v2r.registry import ModelManifest, ModelRegistry, TensorSpec
from v2r.server import FeatureSink, ModelServer, ServerClient
from v2r.server import protocol as P


class Boom(Executor):
    def _run(self, batch, ids):
        raise RuntimeError("kaput")


def images(rng, n):
    return [rng.integers(0, 256, (8, 8, 3), dtype=np.uint8) for _ in range(n)]


@pytest.fixture
def handle(tmp_path):
    sink = FeatureSink(tmp_path / "sink.hyfv", build_index(128), 128)
    server = ModelServer(
        {"emb": HistogramEmbedding(), "slow": SyntheticLatency(1.0), "boom": Boom()},
        feature_sink=sink, workers=4, max_frame_bytes=1 << 20,
    )
    h = server.serve(("127.0.0.1", 0))
    yield h
    h.shutdown()


def test_in_process_infer(rng):
    server = ModelServer({"emb": HistogramEmbedding()})
    reqs = [InferenceRequest(i, "emb", img) for i, img in enumerate(images(rng, 3))]
    outs = server.infer(InferenceBatch(1, "emb", reqs, 0.0, "size"))
    assert [o.request_id for o in outs] == [0, 1, 2]
    for o in outs:
        assert o.feature.dim == 128
        assert np.linalg.norm(o.feature.values) == pytest.approx(1.0, abs=1e-5)
    with pytest.raises(UnknownModel):
        server.infer(InferenceBatch(2, "nope", reqs, 0.0, "size"))
    with pytest.raises(ExecutorFailure):
        ModelServer({"boom": Boom()}).infer(InferenceBatch(3, "boom", reqs, 0.0, "size"))


def test_registry_must_know_models(tmp_path):
    reg = ModelRegistry(tmp_path / "r")
    with pytest.raises(NotFound):
        ModelServer({"emb": HistogramEmbedding()}, registry=reg)
    reg.register_model(ModelManifest("emb", "e", "embedding", TensorSpec("u8", ("batch", 8, 8, 3)),
                                     TensorSpec("f32", ("batch", 128))))
    ModelServer({"emb": HistogramEmbedding()}, registry=reg)


def test_bind_failure(handle):
    with pytest.raises(BindFailure):
        ModelServer({}).serve(handle.address)


def test_correlation_echo(handle, rng):
    with ServerClient(handle.address) as c:
        c.send_raw(P.encode_message(P.InferRequest("emb", [(5, images(rng, 1)[0])]), 0xDEADBEEF))
        msg_type, corr, reply = c.recv_frame()
    assert (msg_type, corr) == (P.INFER_RESPONSE, 0xDEADBEEF)
    assert reply.outputs[0].request_id == 5


def test_concurrent_clients(handle):
    n_clients, per_client = 8, 100
    got = [0] * n_clients
    errors = []

    def run(i):
        try:
            with ServerClient(handle.address) as c:
                for j in range(per_client):
                    rid = i * 1000 + j
                    outs = c.infer("emb", [(rid, np.full((4, 4, 3), j, np.uint8))])
                    assert [o.request_id for o in outs] == [rid]
                    got[i] += 1
        except Exception as exc:
            errors.append(exc)

    threads = [threading.Thread(target=run, args=(i,)) for i in range(n_clients)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == [] and sum(got) == 800


def test_oversize_frame_then_usable(handle, rng):
    with ServerClient(handle.address) as c:
        body = bytes(2 << 20)
        c.send_raw(struct.pack("<IBQ", P.PREFIX.size + len(body), P.INFER_REQUEST, 77) + body)
        msg_type, corr, err = c.recv_frame()
        assert (msg_type, corr, err.code) == (P.ERROR, 77, P.E_FRAME_TOO_LARGE)
        assert [o.request_id for o in c.infer("emb", [(1, images(rng, 1)[0])])] == [1]


def test_malformed_body_then_usable(handle, rng):
    with ServerClient(handle.address) as c:
        c.send_raw(P.encode_frame(P.INFER_REQUEST, 3, b"\x05\x00ab"))
        msg_type, corr, err = c.recv_frame()
        assert (msg_type, corr, err.code) == (P.ERROR, 3, P.E_MALFORMED)
        c.send_raw(P.encode_frame(99, 4, b""))
        assert c.recv_frame()[2].code == P.E_UNKNOWN_TYPE
        assert len(c.infer("emb", [(1, images(rng, 1)[0])])) == 1


def test_unknown_model_carries_ids(handle, rng):
    with ServerClient(handle.address) as c:
        with pytest.raises(RemoteError) as info:
            c.infer("ghost", [(i, img) for i, img in zip((4, 5, 6), images(rng, 3))])
    assert info.value.code == P.E_UNKNOWN_MODEL and info.value.request_ids == [4, 5, 6]


def test_executor_failure_is_isolated(handle, rng):
    with ServerClient(handle.address) as c:
        with pytest.raises(RemoteError) as info:
            c.infer("boom", [(1, images(rng, 1)[0]), (2, images(rng, 1)[0])])
        assert info.value.code == P.E_EXECUTOR and info.value.request_ids == [1, 2]
        assert len(c.infer("slow", [(3, np.zeros(1, np.float32))])) == 1


def test_sink_matches_responses(handle, tmp_path, rng):
    returned = []
    with ServerClient(handle.address) as c:
        for start in range(0, 30, 6):
            outs = c.infer("emb", [(start + i, img) for i, img in enumerate(images(rng, 6))])
            returned.extend(o.feature for o in outs)
    handle.shutdown()
    sunk = read_features(tmp_path / "sink.hyfv")
    assert sorted(sunk, key=lambda f: f.id) == sorted(returned, key=lambda f: f.id)
    assert handle.server.feature_sink.index.size == 30


def test_status_over_tcp(handle):
    with ServerClient(handle.address) as c:
        c.publish_status(WorkerStatus("w1", 10**13, 12.5, 2048, {"emb": 3}, {"emb": 1}, 55.0))
        snap = c.query_status(3000)
    entry = snap["workers"]["w1"]
    assert entry["status"]["queue_depths"] == {"emb": 3}
    assert entry["stale"] is False


def test_bad_status_gets_error(handle):
    with ServerClient(handle.address) as c:
        body = P.encode_status_publish(WorkerStatus("w", 1, 1.0, 1))
        bad = bytearray(body)
        struct.pack_into("<f", bad, 2 + 1 + 8, 500.0)
        c.send_raw(P.encode_frame(P.STATUS_PUBLISH, 8, bytes(bad)))
        assert c.recv_frame()[2].code == P.E_BAD_STATUS


def test_graceful_shutdown_finishes_inflight(tmp_path):
    server = ModelServer({"slow": SyntheticLatency(200.0)}, workers=2)
    h = server.serve()
    results = []

    def call():
        with ServerClient(h.address) as c:
            results.append(c.infer("slow", [(1, np.zeros(1, np.float32))]))

    t = threading.Thread(target=call)
    t.start()
    import time

    time.sleep(0.05)
    h.shutdown()
    t.join(5)
    assert len(results) == 1 and results[0][0].request_id == 1
    with pytest.raises(OSError):
        socket.create_connection(h.address, timeout=0.5)
