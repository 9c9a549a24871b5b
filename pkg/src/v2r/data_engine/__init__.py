from .batcher import (
    DataEngine,
    DynamicBatcher,
    InferenceBatch,
    InferenceRequest,
    ManualClock,
    monotonic_ms,
    replay,
    run_until_idle,
)
from .preprocess import preprocess_image, preprocess_text
from .shots import DEFAULT_MIN_SHOT_LEN, DEFAULT_THRESHOLD, Shot, detect_shots, frame_distances
from .stream import FrameStream, read_stream, write_stream

__all__ = [
    "DataEngine",
    "DynamicBatcher",
    "FrameStream",
    "InferenceBatch",
    "InferenceRequest",
    "ManualClock",
    "Shot",
    "DEFAULT_MIN_SHOT_LEN",
    "DEFAULT_THRESHOLD",
    "detect_shots",
    "frame_distances",
    "monotonic_ms",
    "preprocess_image",
    "preprocess_text",
    "read_stream",
    "replay",
    "run_until_idle",
    "write_stream",
]
