"""HYF raw frame-stream files.

Header (little-endian, 28 bytes)::

    magic "HYFR" | version u16 | width u32 | height u32 | channels u8 |
    pix_fmt u8 (0=gray8, 1=rgb8) | fps_num u32 | fps_den u32 | frame_count u32

followed by ``frame_count`` row-major, channel-interleaved u8 frames.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ..errors import BadMagic, DataEngineError, TruncatedStream, UnsupportedVersion

MAGIC = b"HYFR"
VERSION = 1
HEADER = struct.Struct("<4sHIIBBIII")
PIX_FMTS = {0: "gray8", 1: "rgb8"}
PIX_CODES = {v: k for k, v in PIX_FMTS.items()}
CHANNELS = {"gray8": 1, "rgb8": 3}


@dataclass
class FrameStream:
    width: int
    height: int
    channels: int
    pix_fmt: str
    fps: Fraction
    frame_count: int
    frames: np.ndarray  # (frame_count, height, width, channels) u8

    @property
    def frame_bytes(self) -> int:
        return self.width * self.height * self.channels

    def frame(self, i: int) -> np.ndarray:
        """Frame ``i`` as H×W (gray8) or H×W×3 (rgb8)."""
        f = self.frames[i]
        return f[:, :, 0] if self.channels == 1 else f

    def __iter__(self):
        for i in range(self.frame_count):
            yield self.frame(i)

    def __len__(self):
        return self.frame_count


def _check_geometry(width, height, pix_fmt, channels):
    if pix_fmt not in CHANNELS:
        raise DataEngineError(f"unsupported pix_fmt {pix_fmt!r}")
    if CHANNELS[pix_fmt] != channels:
        raise DataEngineError(f"pix_fmt {pix_fmt} needs {CHANNELS[pix_fmt]} channels, header says {channels}")
    if width < 1 or height < 1:
        raise DataEngineError(f"bad frame size {width}x{height}")


def read_stream(path, mmap: bool = True) -> FrameStream:
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
    if len(head) < 4 or head[:4] != MAGIC:
        raise BadMagic(f"{path}: not an HYF stream (magic {head[:4]!r})")
    if len(head) >= 6:
        (version,) = struct.unpack_from("<H", head, 4)
        if version != VERSION:
            raise UnsupportedVersion(f"{path}: HYF version {version} not supported")
    if len(head) < HEADER.size:
        raise TruncatedStream(f"{path}: header truncated", frame_index=None)
    _, _, width, height, channels, pix_code, fps_num, fps_den, count = HEADER.unpack(head)
    if pix_code not in PIX_FMTS:
        raise DataEngineError(f"{path}: unknown pix_fmt code {pix_code}")
    pix_fmt = PIX_FMTS[pix_code]
    _check_geometry(width, height, pix_fmt, channels)
    if fps_den < 1:
        raise DataEngineError(f"{path}: fps_den must be >= 1")
    frame_bytes = width * height * channels
    payload = os.path.getsize(path) - HEADER.size
    if payload < count * frame_bytes:
        bad = payload // frame_bytes
        raise TruncatedStream(
            f"{path}: frame {bad} truncated ({payload} payload bytes, header promises {count} frames)",
            frame_index=bad,
        )
    shape = (count, height, width, channels)
    if count == 0:
        frames = np.empty(shape, dtype=np.uint8)
    elif mmap:
        frames = np.memmap(path, dtype=np.uint8, mode="r", offset=HEADER.size, shape=shape)
    else:
        with open(path, "rb") as fh:
            fh.seek(HEADER.size)
            frames = np.frombuffer(fh.read(count * frame_bytes), dtype=np.uint8).reshape(shape)
    return FrameStream(width, height, channels, pix_fmt, Fraction(fps_num, fps_den), count, frames)


def write_stream(path, frames, pix_fmt: str = "rgb8", fps=Fraction(25, 1)) -> None:
    """Write an iterable of equally-sized u8 frames as an HYF file."""
    fps = Fraction(fps)
    channels = CHANNELS[pix_fmt]
    frames = [np.asarray(f, dtype=np.uint8) for f in frames]
    if frames:
        first = frames[0]
        height, width = first.shape[:2]
    else:
        height = width = 1
    _check_geometry(width, height, pix_fmt, channels)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, width, height, channels, PIX_CODES[pix_fmt],
                             fps.numerator, fps.denominator, len(frames)))
        for i, f in enumerate(frames):
            want = (height, width) if channels == 1 else (height, width, channels)
            if f.shape != want and not (channels == 1 and f.shape == (height, width, 1)):
                raise DataEngineError(f"frame {i} has shape {f.shape}, expected {want}")
            fh.write(np.ascontiguousarray(f).tobytes())
