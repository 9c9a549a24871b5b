"""TCP model server.

One acceptor thread, one reader thread per connection, and a fixed worker
pool fed by a bounded dispatch queue. When the queue is full a reader blocks
on ``put`` and stops reading its socket, which pushes back on the client
through TCP flow control; requests are never dropped.
"""

from __future__ import annotations

import logging
import os
import queue
import socket
import threading

from ..data_engine.batcher import InferenceBatch, InferenceRequest, monotonic_ms
from ..errors import (
    DuplicateId,
    ExecutorFailure,
    MalformedBody,
    MalformedStatus,
    UnknownModel,
    BindFailure,
    V2RError,
)
from ..matching import FeatureLog
from ..monitor import MonitorMaster
from . import protocol as P

log = logging.getLogger(__name__)


class FeatureSink:
    """Persists features to an append-only HYFV log and forwards them to an index."""

    def __init__(self, log_path=None, index=None, dim=None):
        self.index = index
        dim = dim or (index.dim if index is not None else None)
        self.log = FeatureLog(log_path, dim) if log_path is not None else None
        self._lock = threading.Lock()

    def accept(self, features):
        features = list(features)
        if not features:
            return
        with self._lock:
            if self.log is not None:
                self.log.append(features)
            if self.index is not None:
                try:
                    self.index.add(features)
                except DuplicateId as exc:
                    log.warning("feature ids already indexed, skipping index add: %s", exc)


class ModelServer:
    def __init__(self, executors: dict, registry=None, feature_sink=None, monitor=None,
                 workers=None, max_frame_bytes=None, queue_size=None):
        if registry is not None:
            for model_id in executors:
                registry.get_model(model_id)
        self.executors = dict(executors)
        self.registry = registry
        self.feature_sink = feature_sink
        self.monitor = monitor if monitor is not None else MonitorMaster()
        self.workers = workers or max(2, os.cpu_count() or 1)
        self.max_frame_bytes = max_frame_bytes if max_frame_bytes is not None else P.max_frame_bytes()
        self.queue_size = queue_size or 4 * self.workers
        self._inflight = {}
        self._stats_lock = threading.Lock()

    # in-process path -------------------------------------------------------
    def infer(self, batch: InferenceBatch) -> list:
        """Run one batch; features go to the sink, outputs come back in order."""
        executor = self.executors.get(batch.model_id)
        if executor is None:
            raise UnknownModel(f"model {batch.model_id!r} is not served")
        payloads = batch.payloads
        ids = batch.request_ids
        self._bump(batch.model_id, len(ids))
        try:
            outs = []
            step = executor.max_batch
            for i in range(0, len(payloads), step):
                outs.extend(executor.execute(payloads[i:i + step], ids[i:i + step]))
        except V2RError:
            raise
        except Exception as exc:
            raise ExecutorFailure(f"executor for {batch.model_id!r} failed: {exc}") from exc
        finally:
            self._bump(batch.model_id, -len(ids))
        if self.feature_sink is not None:
            self.feature_sink.accept(o.feature for o in outs if o.feature is not None)
        return outs

    def _bump(self, model_id, delta):
        with self._stats_lock:
            self._inflight[model_id] = self._inflight.get(model_id, 0) + delta

    def inflight(self) -> dict:
        with self._stats_lock:
            return dict(self._inflight)

    # network path ----------------------------------------------------------
    def serve(self, bind_address=("127.0.0.1", 0)) -> "ServerHandle":
        return ServerHandle(self, bind_address).start()


class _Conn:
    def __init__(self, sock, peer):
        self.sock = sock
        self.peer = peer
        self.lock = threading.Lock()
        self.pending = 0
        self.idle = threading.Condition()

    def send(self, frame: bytes):
        with self.lock:
            try:
                self.sock.sendall(frame)
            except OSError as exc:
                log.debug("send to %s failed: %s", self.peer, exc)

    def begin(self):
        with self.idle:
            self.pending += 1

    def end(self):
        with self.idle:
            self.pending -= 1
            self.idle.notify_all()

    def close_when_idle(self, timeout=None):
        with self.idle:
            self.idle.wait_for(lambda: self.pending == 0, timeout)
        try:
            self.sock.close()
        except OSError:
            pass


class ServerHandle:
    def __init__(self, server: ModelServer, bind_address):
        self.server = server
        self.bind_address = bind_address
        self.dispatch = queue.Queue(maxsize=server.queue_size)
        self._listener = None
        self._threads = []
        self._readers = []
        self._conns = set()
        self._conns_lock = threading.Lock()
        self._stopping = threading.Event()
        self.responses_sent = 0
        self._batch_ids = iter(range(1, 2**63))

    @property
    def address(self) -> tuple:
        return self._listener.getsockname()[:2]

    def start(self):
        host, port = self.bind_address
        try:
            sock = socket.create_server((host, port), reuse_port=False)
        except OSError as exc:
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
        sock.settimeout(0.2)
        self._listener = sock
        for i in range(self.server.workers):
            t = threading.Thread(target=self._worker, name=f"v2r-worker-{i}", daemon=True)
            t.start()
            self._threads.append(t)
        t = threading.Thread(target=self._accept_loop, name="v2r-acceptor", daemon=True)
        t.start()
        self._threads.append(t)
        log.info("serving on %s:%d", *self.address)
        return self

    def _accept_loop(self):
        while not self._stopping.is_set():
            try:
                sock, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Conn(sock, peer)
            with self._conns_lock:
                self._conns.add(conn)
            t = threading.Thread(target=self._read_loop, args=(conn,), name=f"v2r-conn-{peer[1]}", daemon=True)
            t.start()
            self._readers.append(t)

    def _error(self, conn, corr, code, message, request_ids=()):
        body = P.encode_error(P.ErrorMessage(code, message, list(request_ids)))
        conn.send(P.encode_frame(P.ERROR, corr, body, max_bytes=2**32 - 1))

    def _read_loop(self, conn: _Conn):
        sock = conn.sock
        try:
            while not self._stopping.is_set():
                head = P.recv_exact(sock, P.LENGTH.size)
                if head is None:
                    break
                (length,) = P.LENGTH.unpack(head)
                if length > self.server.max_frame_bytes:
                    prefix = P.recv_exact(sock, min(length, P.PREFIX.size)) or b""
                    corr = P.PREFIX.unpack(prefix)[1] if len(prefix) == P.PREFIX.size else 0
                    self._error(conn, corr, P.E_FRAME_TOO_LARGE,
                                f"frame length {length} exceeds limit {self.server.max_frame_bytes}")
                    if not P.discard(sock, length - len(prefix)):
                        break
                    continue
                payload = P.recv_exact(sock, length)
                if payload is None:
                    break
                self._handle_payload(conn, payload)
        except (ConnectionError, OSError) as exc:
            log.debug("connection %s ended: %s", conn.peer, exc)
        finally:
            if not self._stopping.is_set():
                with self._conns_lock:
                    self._conns.discard(conn)
                conn.close_when_idle()

    def _handle_payload(self, conn, payload):
        try:
            msg_type, corr, body = P.split_payload(payload)
        except MalformedBody as exc:
            self._error(conn, 0, P.E_MALFORMED, str(exc))
            return
        if msg_type not in P.MSG_TYPES:
            self._error(conn, corr, P.E_UNKNOWN_TYPE, f"unknown msg_type {msg_type}")
            return
        try:
            if msg_type == P.INFER_REQUEST:
                msg = P.decode_infer_request(body)
                conn.begin()
                # blocks when the pool is saturated: TCP back-pressure
                self.dispatch.put((conn, corr, msg))
            elif msg_type == P.STATUS_PUBLISH:
                status = P.decode_status_publish(body)
                self.server.monitor.publish_status(status)
            elif msg_type == P.STATUS_QUERY:
                q = P.decode_status_query(body)
                snap = self.server.monitor.snapshot(q.ttl_ms).to_json()
                conn.send(P.encode_message(P.StatusSnapshotMsg(snap), corr, max_bytes=2**32 - 1))
            else:
                self._error(conn, corr, P.E_UNKNOWN_TYPE, f"msg_type {msg_type} is not accepted by the server")
        except MalformedBody as exc:
            self._error(conn, corr, P.E_MALFORMED, str(exc))
        except MalformedStatus as exc:
            self._error(conn, corr, P.E_BAD_STATUS, str(exc))

    def _worker(self):
        while True:
            item = self.dispatch.get()
            try:
                if item is None:
                    return
                try:
                    self._run_request(*item)
                finally:
                    item[0].end()
            finally:
                self.dispatch.task_done()

    def _run_request(self, conn, corr, msg: P.InferRequest):
        ids = [rid for rid, _ in msg.items]
        now = monotonic_ms()
        batch = InferenceBatch(
            next(self._batch_ids), msg.model_id,
            [InferenceRequest(rid, msg.model_id, t, enqueued_at=now) for rid, t in msg.items],
            now, "size",
        )
        try:
            if not msg.items:
                outs = []
                if msg.model_id not in self.server.executors:
                    raise UnknownModel(f"model {msg.model_id!r} is not served")
            else:
                outs = self.server.infer(batch)
        except UnknownModel as exc:
            self._error(conn, corr, P.E_UNKNOWN_MODEL, str(exc), ids)
            return
        except V2RError as exc:
            self._error(conn, corr, P.E_EXECUTOR, f"{type(exc).__name__}: {exc}", ids)
            return
        except Exception as exc:
            log.exception("unexpected failure serving %s", msg.model_id)
            self._error(conn, corr, P.E_INTERNAL, f"{type(exc).__name__}: {exc}", ids)
            return
        conn.send(P.encode_message(P.InferResponse(outs), corr, max_bytes=2**32 - 1))
        self.responses_sent += 1

    def shutdown(self, timeout: float = 10.0):
        """Stop accepting and reading, finish queued batches, then close."""
        self._stopping.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._conns_lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.sock.shutdown(socket.SHUT_RD)
            except OSError:
                pass
        for t in self._readers:
            t.join(timeout)
        self.dispatch.join()
        for _ in range(self.server.workers):
            self.dispatch.put(None)
        for t in self._threads:
            t.join(timeout)
        for c in conns:
            c.close_when_idle(timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(bind_address, registry, executors, feature_sink=None, **kw) -> ServerHandle:
    return ModelServer(executors, registry=registry, feature_sink=feature_sink, **kw).serve(bind_address)
