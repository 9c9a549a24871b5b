import numpy as np
import pytest

from v2r.bench import make_shot_stream


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def shot_stream(tmp_path):
    """90-frame stream of three 30-frame solid-colour shots."""
    return make_shot_stream(str(tmp_path / "three_shots.hyf"), n_shots=3, frames_per_shot=30)
