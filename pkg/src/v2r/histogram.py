"""Per-channel 32-bin intensity histograms shared by shot detection and the
histogram embedder."""

import cv2
import numpy as np

BINS = 32


def channel_histograms(frame: np.ndarray) -> np.ndarray:
    """Return a (C, 32) float64 array of pixel-count-normalized histograms.

    ``frame`` is u8, either H×W (one channel) or H×W×C.
    """
    if frame.dtype != np.uint8:
        raise TypeError(f"expected u8 frame, got {frame.dtype}")
    img = frame if frame.ndim == 3 else frame[:, :, None]
    img = np.ascontiguousarray(img)
    h, w, c = img.shape
    out = np.empty((c, BINS), dtype=np.float64)
    for ch in range(c):
        # counts are exact integers in f32 below 2**24 pixels
        out[ch] = cv2.calcHist([img], [ch], None, [BINS], [0, 256]).reshape(-1)
    out /= float(h * w)
    return out


def histogram_distance(prev: np.ndarray, cur: np.ndarray) -> float:
    """Mean over channels of the L1 distance between histograms, in [0, 2]."""
    return float(np.abs(cur - prev).sum() / cur.shape[0])
