"""Blocking client for the model server protocol."""

from __future__ import annotations

import itertools
import socket

from ..errors import RemoteError, ServerError
from . import protocol as P


def parse_address(addr) -> tuple:
    if isinstance(addr, tuple):
        return addr
    host, _, port = str(addr).rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)


class ServerClient:
    """One connection, one request in flight at a time."""

    def __init__(self, address, timeout: float | None = 30.0):
        self.address = parse_address(address)
        self.sock = socket.create_connection(self.address, timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._corr = itertools.count(1)

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def send_raw(self, data: bytes):
        self.sock.sendall(data)

    def recv_frame(self) -> tuple:
        """Next frame as ``(msg_type, correlation_id, decoded message)``."""
        head = P.recv_exact(self.sock, P.LENGTH.size)
        if head is None:
            raise ServerError("server closed the connection")
        (length,) = P.LENGTH.unpack(head)
        payload = P.recv_exact(self.sock, length)
        msg_type, corr, body = P.split_payload(payload)
        return msg_type, corr, P.decode_body(msg_type, body)

    def _call(self, msg, expect):
        corr = next(self._corr)
        self.sock.sendall(P.encode_message(msg, corr))
        msg_type, rcorr, reply = self.recv_frame()
        if rcorr != corr:
            raise ServerError(f"correlation mismatch: sent {corr}, got {rcorr}")
        if msg_type == P.ERROR:
            raise RemoteError(reply.code, reply.message, reply.request_ids)
        if msg_type != expect:
            raise ServerError(f"unexpected reply type {msg_type}")
        return reply

    def infer(self, model_id: str, items) -> list:
        """Send ``[(request_id, tensor)]`` as one batch; returns the outputs."""
        return self._call(P.InferRequest(model_id, list(items)), P.INFER_RESPONSE).outputs

    def publish_status(self, status):
        # fire-and-forget; the server only answers malformed publishes
        self.sock.sendall(P.encode_message(status, next(self._corr)))

    def query_status(self, ttl_ms: int = 3000) -> dict:
        return self._call(P.StatusQuery(ttl_ms), P.STATUS_SNAPSHOT).snapshot
