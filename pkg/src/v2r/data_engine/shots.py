from __future__ import annotations

from dataclasses import dataclass

from ..errors import DataEngineError, EmptyStream
from ..histogram import channel_histograms, histogram_distance

DEFAULT_THRESHOLD = 0.35
DEFAULT_MIN_SHOT_LEN = 2


@dataclass(frozen=True)
class Shot:
    start_frame: int
    end_frame: int
    keyframe: int

    def __len__(self):
        return self.end_frame - self.start_frame + 1


def frame_distances(frames):
    """Histogram distance between each frame and its predecessor (first is 0)."""
    out = []
    prev = None
    for f in frames:
        h = channel_histograms(f)
        out.append(0.0 if prev is None else histogram_distance(prev, h))
        prev = h
    return out


def detect_shots(stream, threshold: float = DEFAULT_THRESHOLD, min_shot_len: int = DEFAULT_MIN_SHOT_LEN):
    """Split a stream into shots in a single pass.

    A cut opens at frame ``t`` when the histogram distance to ``t-1`` exceeds
    ``threshold`` and the running shot already spans ``min_shot_len`` frames.
    The keyframe of each shot is its first frame.
    """
    if not 0.0 < threshold <= 2.0:
        raise DataEngineError(f"threshold must be in (0, 2], got {threshold}")
    if min_shot_len < 1:
        raise DataEngineError(f"min_shot_len must be >= 1, got {min_shot_len}")
    n = len(stream)
    if n == 0:
        raise EmptyStream("stream has no frames")
    shots = []
    start = 0
    prev = channel_histograms(stream.frame(0))
    for t in range(1, n):
        cur = channel_histograms(stream.frame(t))
        if histogram_distance(prev, cur) > threshold and t - start >= min_shot_len:
            shots.append(Shot(start, t - 1, start))
            start = t
        prev = cur
    shots.append(Shot(start, n - 1, start))
    return shots
