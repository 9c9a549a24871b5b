"""Length-prefixed binary wire protocol (all integers little-endian).

Frame::

    length:u32 | msg_type:u8 | correlation_id:u64 | body

``length`` counts every byte after itself. Tensors are encoded as
``ndim:u8, dims:u32 × ndim, dtype:u8 (0=f32, 1=u8), raw data``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import FrameTooLarge, MalformedBody
from ..executors import ExecutorOutput
from ..matching import FeatureVector
from ..monitor import WorkerStatus

INFER_REQUEST = 1
INFER_RESPONSE = 2
STATUS_QUERY = 3
STATUS_SNAPSHOT = 4
ERROR = 5
STATUS_PUBLISH = 6
MSG_TYPES = (INFER_REQUEST, INFER_RESPONSE, STATUS_QUERY, STATUS_SNAPSHOT, ERROR, STATUS_PUBLISH)

LENGTH = struct.Struct("<I")
PREFIX = struct.Struct("<BQ")  # msg_type, correlation_id
DEFAULT_MAX_FRAME_MB = 64

DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype(np.uint8)}

# error codes carried in Error frames
E_UNKNOWN_TYPE = 1
E_FRAME_TOO_LARGE = 2
E_MALFORMED = 3
E_UNKNOWN_MODEL = 4
E_EXECUTOR = 5
E_BAD_STATUS = 6
E_INTERNAL = 7


def max_frame_bytes() -> int:
    return int(float(os.environ.get("V2R_MAX_FRAME_MB", DEFAULT_MAX_FRAME_MB)) * 1024 * 1024)


# messages -------------------------------------------------------------------
@dataclass
class InferRequest:
    model_id: str
    items: list = field(default_factory=list)  # [(request_id, ndarray)]

    def __eq__(self, other):
        if not isinstance(other, InferRequest) or self.model_id != other.model_id:
            return False
        if len(self.items) != len(other.items):
            return False
        return all(
            ra == rb and ta.dtype == tb.dtype and ta.shape == tb.shape and ta.tobytes() == tb.tobytes()
            for (ra, ta), (rb, tb) in zip(self.items, other.items)
        )


@dataclass
class InferResponse:
    outputs: list = field(default_factory=list)  # [ExecutorOutput]


@dataclass
class ErrorMessage:
    code: int
    message: str
    request_ids: list = field(default_factory=list)


@dataclass
class StatusQuery:
    ttl_ms: int = 3000


@dataclass
class StatusSnapshotMsg:
    snapshot: dict


# body writer / reader -------------------------------------------------------
class _Writer:
    def __init__(self):
        self.parts = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u16(self, v):
        self.parts.append(struct.pack("<H", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v):
        self.parts.append(struct.pack("<Q", v))

    def f32(self, v):
        self.parts.append(struct.pack("<f", v))

    def str16(self, s):
        raw = s.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError("string longer than 65535 bytes")
        self.u16(len(raw))
        self.parts.append(raw)

    def tensor(self, arr):
        arr = np.asarray(arr)
        if arr.dtype not in DTYPE_CODES:
            raise ValueError(f"unsupported tensor dtype {arr.dtype}")
        if arr.ndim > 255:
            raise ValueError("too many dims")
        self.u8(arr.ndim)
        for d in arr.shape:
            self.u32(d)
        self.u8(DTYPE_CODES[arr.dtype])
        self.parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())

    def bytes(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.off = 0

    def _take(self, n, what):
        if self.off + n > len(self.data):
            raise MalformedBody(f"truncated {what}: need {n} bytes, {len(self.data) - self.off} left", len(self.data))
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def _unpack(self, fmt, n, what):
        return struct.unpack(fmt, self._take(n, what))[0]

    def u8(self, what="u8"):
        return self._unpack("<B", 1, what)

    def u16(self, what="u16"):
        return self._unpack("<H", 2, what)

    def u32(self, what="u32"):
        return self._unpack("<I", 4, what)

    def u64(self, what="u64"):
        return self._unpack("<Q", 8, what)

    def f32(self, what="f32"):
        return self._unpack("<f", 4, what)

    def str16(self, what="string"):
        start = self.off
        n = self.u16(what + " length")
        raw = self._take(n, what)
        try:
            return bytes(raw).decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedBody(f"invalid UTF-8 in {what}", start) from None

    def tensor(self, what="tensor"):
        start = self.off
        ndim = self.u8(what + " ndim")
        dims = [self.u32(what + " dim") for _ in range(ndim)]
        code = self.u8(what + " dtype")
        if code not in CODE_DTYPES:
            raise MalformedBody(f"unknown dtype code {code} in {what}", self.off - 1)
        dt = CODE_DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        nbytes = count * dt.itemsize
        if nbytes > len(self.data) - self.off:
            raise MalformedBody(f"truncated {what} data (tensor at {start})", len(self.data))
        raw = self._take(nbytes, what + " data")
        return np.frombuffer(bytes(raw), dtype=dt).reshape(dims).astype(dt.newbyteorder("="), copy=False)

    def finish(self):
        if self.off != len(self.data):
            raise MalformedBody(f"{len(self.data) - self.off} trailing bytes", self.off)


# body codecs ----------------------------------------------------------------
def encode_infer_request(msg: InferRequest) -> bytes:
    w = _Writer()
    w.str16(msg.model_id)
    w.u32(len(msg.items))
    for rid, tensor in msg.items:
        w.u64(rid)
        w.tensor(tensor)
    return w.bytes()


def decode_infer_request(body) -> InferRequest:
    r = _Reader(body)
    model_id = r.str16("model_id")
    count = r.u32("count")
    items = []
    for _ in range(count):
        rid = r.u64("request_id")
        items.append((rid, r.tensor()))
    r.finish()
    return InferRequest(model_id, items)


def encode_infer_response(msg: InferResponse) -> bytes:
    w = _Writer()
    w.u32(len(msg.outputs))
    for out in msg.outputs:
        w.u64(out.request_id)
        w.u16(len(out.predictions))
        for label, score in out.predictions:
            w.str16(label)
            w.f32(score)
        if out.feature is None:
            w.u8(0)
        else:
            w.u8(1)
            w.tensor(out.feature.values)
    return w.bytes()


def decode_infer_response(body) -> InferResponse:
    r = _Reader(body)
    count = r.u32("count")
    outputs = []
    for _ in range(count):
        rid = r.u64("request_id")
        npred = r.u16("pred_count")
        preds = []
        for _ in range(npred):
            label = r.str16("label")
            preds.append((label, r.f32("score")))
        flag_at = r.off
        has = r.u8("has_feature")
        feature = None
        if has == 1:
            t = r.tensor("feature")
            if t.dtype != np.float32 or t.ndim != 1:
                raise MalformedBody("feature must be a 1-d f32 tensor", flag_at + 1)
            feature = FeatureVector(rid, t)
        elif has != 0:
            raise MalformedBody(f"has_feature must be 0 or 1, got {has}", flag_at)
        outputs.append(ExecutorOutput(rid, preds, feature))
    r.finish()
    return InferResponse(outputs)


def encode_status_publish(status: WorkerStatus) -> bytes:
    w = _Writer()
    w.str16(status.worker_id)
    w.u64(status.timestamp)
    w.f32(status.cpu_pct)
    w.u64(status.mem_bytes)
    for table in (status.queue_depths, status.inflight):
        w.u16(len(table))
        for k, v in table.items():
            w.str16(k)
            w.u32(v)
    if status.device_util_pct is None:
        w.u8(0)
        w.f32(0.0)
    else:
        w.u8(1)
        w.f32(status.device_util_pct)
    return w.bytes()


def decode_status_publish(body) -> WorkerStatus:
    r = _Reader(body)
    worker_id = r.str16("worker_id")
    timestamp = r.u64("timestamp")
    cpu = r.f32("cpu_pct")
    mem = r.u64("mem_bytes")
    tables = []
    for name in ("queue_depths", "inflight"):
        n = r.u16(name + " count")
        table = {}
        for _ in range(n):
            k = r.str16(name + " model_id")
            table[k] = r.u32(name + " value")
        tables.append(table)
    flag_at = r.off
    has = r.u8("has_device")
    dev = r.f32("device_util_pct")
    if has not in (0, 1):
        raise MalformedBody(f"has_device must be 0 or 1, got {has}", flag_at)
    r.finish()
    return WorkerStatus(worker_id, timestamp, cpu, mem, tables[0], tables[1], dev if has else None)


def encode_error(msg: ErrorMessage) -> bytes:
    w = _Writer()
    w.u16(msg.code)
    w.str16(msg.message[:16000])
    w.u32(len(msg.request_ids))
    for rid in msg.request_ids:
        w.u64(rid)
    return w.bytes()


def decode_error(body) -> ErrorMessage:
    r = _Reader(body)
    code = r.u16("code")
    message = r.str16("message")
    n = r.u32("count")
    ids = [r.u64("request_id") for _ in range(n)]
    r.finish()
    return ErrorMessage(code, message, ids)


def encode_status_query(msg: StatusQuery) -> bytes:
    return struct.pack("<I", msg.ttl_ms)


def decode_status_query(body) -> StatusQuery:
    r = _Reader(body)
    ttl = r.u32("ttl_ms")
    r.finish()
    return StatusQuery(ttl)


def encode_status_snapshot(msg: StatusSnapshotMsg) -> bytes:
    return json.dumps(msg.snapshot, sort_keys=True).encode("utf-8")


def decode_status_snapshot(body) -> StatusSnapshotMsg:
    try:
        return StatusSnapshotMsg(json.loads(bytes(body).decode("utf-8")))
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedBody(f"bad snapshot JSON: {exc}", 0) from None


ENCODERS = {
    INFER_REQUEST: encode_infer_request,
    INFER_RESPONSE: encode_infer_response,
    STATUS_QUERY: encode_status_query,
    STATUS_SNAPSHOT: encode_status_snapshot,
    ERROR: encode_error,
    STATUS_PUBLISH: encode_status_publish,
}
DECODERS = {
    INFER_REQUEST: decode_infer_request,
    INFER_RESPONSE: decode_infer_response,
    STATUS_QUERY: decode_status_query,
    STATUS_SNAPSHOT: decode_status_snapshot,
    ERROR: decode_error,
    STATUS_PUBLISH: decode_status_publish,
}
MESSAGE_TYPES = {
    InferRequest: INFER_REQUEST,
    InferResponse: INFER_RESPONSE,
    StatusQuery: STATUS_QUERY,
    StatusSnapshotMsg: STATUS_SNAPSHOT,
    ErrorMessage: ERROR,
    WorkerStatus: STATUS_PUBLISH,
}


# frames ---------------------------------------------------------------------
def encode_frame(msg_type: int, correlation_id: int, body: bytes, max_bytes: int | None = None) -> bytes:
    length = PREFIX.size + len(body)
    limit = max_frame_bytes() if max_bytes is None else max_bytes
    if length > limit:
        raise FrameTooLarge(f"frame of {length} bytes exceeds limit {limit}")
    return LENGTH.pack(length) + PREFIX.pack(msg_type, correlation_id) + body


def encode_message(msg, correlation_id: int, max_bytes: int | None = None) -> bytes:
    msg_type = MESSAGE_TYPES[type(msg)]
    return encode_frame(msg_type, correlation_id, ENCODERS[msg_type](msg), max_bytes)


def split_payload(payload) -> tuple:
    """Split a frame payload into ``(msg_type, correlation_id, body)``."""
    if len(payload) < PREFIX.size:
        raise MalformedBody("frame payload shorter than its 9-byte prefix", len(payload))
    msg_type, corr = PREFIX.unpack_from(payload)
    return msg_type, corr, memoryview(payload)[PREFIX.size:]


def decode_body(msg_type: int, body):
    try:
        decoder = DECODERS[msg_type]
    except KeyError:
        raise MalformedBody(f"unknown msg_type {msg_type}", 0) from None
    return decoder(body)


def recv_exact(sock, n: int) -> bytes | None:
    """Read exactly ``n`` bytes; ``None`` on clean EOF before the first byte."""
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            if not buf:
                return None
            raise ConnectionError(f"connection closed mid-frame ({len(buf)}/{n} bytes)")
        buf += chunk
    return bytes(buf)


def discard(sock, n: int) -> bool:
    while n > 0:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            return False
        n -= len(chunk)
    return True
