from fractions import Fraction

import numpy as np
import pytest

from v2r.data_engine import read_stream, write_stream
from v2r.data_engine.stream import HEADER, MAGIC
from v2r.errors import BadMagic, TruncatedStream, UnsupportedVersion


def test_tiny_gray_stream(tmp_path):
    p = tmp_path / "g.hyf"
    frames = [np.full((2, 2), v, np.uint8) for v in (0, 1, 2)]
    write_stream(p, frames, "gray8", Fraction(30000, 1001))
    s = read_stream(p)
    assert (s.width, s.height, s.channels, s.pix_fmt) == (2, 2, 1, "gray8")
    assert s.frame_count == 3 and s.frame_bytes == 4
    assert s.fps == Fraction(30000, 1001)
    assert p.stat().st_size == HEADER.size + 12
    for v, f in enumerate(s):
        assert f.shape == (2, 2) and (f == v).all()


def test_header_layout(tmp_path):
    p = tmp_path / "h.hyf"
    write_stream(p, [np.zeros((3, 5, 3), np.uint8)], "rgb8", 25)
    raw = p.read_bytes()
    assert HEADER.size == 28
    assert raw[:4] == MAGIC
    assert HEADER.unpack(raw[:28])[1:] == (1, 5, 3, 3, 1, 25, 1, 1)


def test_truncated_mid_frame_names_frame(tmp_path):
    p = tmp_path / "t.hyf"
    write_stream(p, [np.zeros((4, 4, 3), np.uint8)] * 5, "rgb8")
    raw = p.read_bytes()
    p.write_bytes(raw[: HEADER.size + 48 * 3 + 10])
    with pytest.raises(TruncatedStream) as info:
        read_stream(p)
    assert info.value.frame_index == 3
    assert "frame 3" in str(info.value)


def test_round_trip_1000_frames(tmp_path, rng):
    frames = rng.integers(0, 256, size=(1000, 9, 16, 3), dtype=np.uint8)
    p = tmp_path / "big.hyf"
    write_stream(p, frames)
    for mmap in (True, False):
        s = read_stream(p, mmap=mmap)
        assert s.frame_count == 1000
        assert np.asarray(s.frames).tobytes() == frames.tobytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.hyf"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(BadMagic):
        read_stream(p)


def test_unsupported_version(tmp_path):
    p = tmp_path / "v.hyf"
    write_stream(p, [np.zeros((2, 2), np.uint8)], "gray8")
    raw = bytearray(p.read_bytes())
    raw[4:6] = (2).to_bytes(2, "little")
    p.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersion):
        read_stream(p)
