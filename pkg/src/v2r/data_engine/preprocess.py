from __future__ import annotations

import re
import string

import numpy as np

from ..errors import BadDimensions

_COUNTER = re.compile(r"^\s*\d+\s*$")
_TIMING = re.compile(r"^\s*\d{2}:\d{2}:\d{2},\d{3}\s*-->\s*\d{2}:\d{2}:\d{2},\d{3}\s*$")
_PUNCT = string.punctuation


def nearest_indices(src: int, dst: int) -> np.ndarray:
    # floor((i + 0.5) * src / dst) in exact integer arithmetic
    i = np.arange(dst, dtype=np.int64)
    return ((2 * i + 1) * src) // (2 * dst)


def preprocess_image(frame: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbour resize to ``target_h × target_w`` and scale u8 to [0, 1] f32."""
    if target_h < 1 or target_w < 1:
        raise BadDimensions(f"target size must be >= 1, got {target_h}x{target_w}")
    if frame.ndim not in (2, 3) or frame.shape[0] < 1 or frame.shape[1] < 1:
        raise BadDimensions(f"bad frame shape {frame.shape}")
    rows = nearest_indices(frame.shape[0], target_h)
    cols = nearest_indices(frame.shape[1], target_w)
    resized = frame[rows[:, None], cols[None, :]]
    return resized.astype(np.float32) / np.float32(255.0)


def preprocess_text(subtitle_text: str) -> list:
    """Tokenize SRT-style subtitles: drop cue counters and timing lines,
    lowercase, split on whitespace, trim ASCII punctuation."""
    tokens = []
    for line in subtitle_text.splitlines():
        if _COUNTER.match(line) or _TIMING.match(line):
            continue
        for tok in line.lower().split():
            tok = tok.strip(_PUNCT)
            if tok:
                tokens.append(tok)
    return tokens
