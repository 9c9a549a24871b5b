"""Synthetic HYF fixtures: solid-colour shots with in-bin pixel noise."""

from __future__ import annotations

import numpy as np

from ..histogram import BINS

_BIN_WIDTH = 256 // BINS


def shot_colors(n_shots: int, seed: int = 0) -> np.ndarray:
    """``n_shots`` RGB colours at histogram-bin centres; neighbours always differ."""
    rng = np.random.default_rng(seed)
    bins = np.empty((n_shots, 3), dtype=np.int64)
    for i in range(n_shots):
        while True:
            cand = rng.integers(0, BINS, size=3)
            if i == 0 or np.any(cand != bins[i - 1]):
                break
        bins[i] = cand
    return (bins * _BIN_WIDTH + _BIN_WIDTH // 2).astype(np.uint8)


def shot_frames(colors, frames_per_shot: int, height: int, width: int, noise: int = 3, seed: int = 0):
    """Yield frames: ``frames_per_shot`` noisy copies of each colour.

    Noise stays within ±``noise`` (< half a bin), so every frame of a shot has
    the same 32-bin histogram.
    """
    rng = np.random.default_rng(seed)
    for color in np.asarray(colors, dtype=np.int16):
        for _ in range(frames_per_shot):
            jitter = rng.integers(-noise, noise + 1, size=(height, width, 3), dtype=np.int16) if noise else 0
            yield np.clip(color + jitter, 0, 255).astype(np.uint8)


def solid_frames(levels, height: int, width: int, channels: int = 3):
    """Frames of constant intensity, one per entry of ``levels``."""
    shape = (height, width) if channels == 1 else (height, width, channels)
    for v in levels:
        yield np.full(shape, v, dtype=np.uint8)
