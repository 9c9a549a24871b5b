import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from v2r.errors import BadDimensions, BatchTooLarge, ShapeMismatch
from v2r.executors import (
    HistogramEmbedding,
    SyntheticLatency,
    build_executor,
    embed_histogram,
    executor_config,
    projection_matrix,
    splitmix64,
)
from v2r.registry import ModelManifest, TensorSpec

M64 = (1 << 64) - 1


def splitmix_ref(seed, n):
    """Plain-integer splitmix64, independent of the numpy path."""
    state = seed & M64
    out = []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & M64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        out.append(z ^ (z >> 31))
    return out


def entry_ref(x):
    return (x >> 40) / 2**24 * 2 - 1


def test_splitmix_known_first_output():
    assert splitmix_ref(0, 1)[0] == 0xE220A8397B1DCDAF
    assert int(splitmix64(0, 1)[0]) == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("seed", [0, 7, 8, 2**63 + 5])
def test_splitmix_matches_reference(seed):
    assert [int(v) for v in splitmix64(seed, 200)] == splitmix_ref(seed, 200)


def test_projection_matrix_row_major():
    seed, dim = 7, 16
    m = projection_matrix(seed, dim)
    raw = splitmix_ref(seed, 96 * dim)
    for r in (0, 1, 50, 95):
        for c in (0, 5, 15):
            assert m[r, c] == np.float32(entry_ref(raw[r * dim + c]))
    assert m.min() >= -1.0 and m.max() < 1.0


def test_black_image_is_normalized_sum_of_three_rows():
    seed, dim = 7, 128
    raw = splitmix_ref(seed, 96 * dim)
    rows = [[entry_ref(raw[r * dim + c]) for c in range(dim)] for r in (0, 32, 64)]
    summed = [a + b + c for a, b, c in zip(*rows)]
    norm = sum(v * v for v in summed) ** 0.5
    expected = np.array([v / norm for v in summed])
    got = embed_histogram(np.zeros((5, 7, 3), np.uint8), seed, dim)
    np.testing.assert_allclose(got, expected, atol=1e-6)


def test_identical_images_identical_unit_features(rng):
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    ex = HistogramEmbedding(seed=7, dim=128)
    a, b = ex.execute([img, img.copy()])
    assert np.array_equal(a.feature.values, b.feature.values)
    assert abs(np.linalg.norm(a.feature.values) - 1.0) <= 1e-5


def test_seeds_decorrelate(rng):
    sims = []
    for _ in range(100):
        img = rng.integers(0, 256, (12, 12, 3), dtype=np.uint8)
        sims.append(float(embed_histogram(img, 7, 128) @ embed_histogram(img, 8, 128)))
    assert max(sims) < 0.5


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**32))
def test_unit_norm_any_image(h, w, seed):
    img = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
    assert abs(float(np.linalg.norm(embed_histogram(img, seed, 32))) - 1.0) <= 1e-5


def test_pixel_permutation_invariance(rng):
    img = rng.integers(0, 256, (10, 10, 3), dtype=np.uint8)
    shuffled = img.copy()
    for ch in range(3):
        flat = shuffled[:, :, ch].reshape(-1)
        shuffled[:, :, ch] = rng.permutation(flat).reshape(10, 10)
    assert np.array_equal(embed_histogram(img, 3, 64), embed_histogram(shuffled, 3, 64))


def test_f32_input_matches_u8(rng):
    img = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    as_f32 = img.astype(np.float32) / np.float32(255.0)
    assert np.array_equal(embed_histogram(img, 1, 32), embed_histogram(as_f32, 1, 32))


def test_batch_permutation_permutes_outputs(rng):
    ex = HistogramEmbedding(seed=2, dim=32)
    imgs = [rng.integers(0, 256, (6, 6, 3), dtype=np.uint8) for _ in range(5)]
    perm = [3, 0, 4, 1, 2]
    outs = ex.execute(imgs, request_ids=list(range(5)))
    pouts = ex.execute([imgs[i] for i in perm], request_ids=perm)
    for o, i in zip(pouts, perm):
        assert o.request_id == i
        assert np.array_equal(o.feature.values, outs[i].feature.values)


def test_predictions_sorted_and_bounded(rng):
    ex = HistogramEmbedding(seed=2, dim=32)
    (out,) = ex.execute([rng.integers(0, 256, (6, 6, 3), dtype=np.uint8)])
    scores = [s for _, s in out.predictions]
    assert scores == sorted(scores, reverse=True)
    assert all(0.0 <= s <= 1.0 for s in scores)


def test_bad_dims():
    with pytest.raises(BadDimensions):
        embed_histogram(np.zeros((4, 4, 3), np.uint8), 0, 4)
    with pytest.raises(BadDimensions):
        embed_histogram(np.zeros((4, 4), np.uint8), 0, 16)
    with pytest.raises(BadDimensions):
        embed_histogram(np.zeros((0, 4, 3), np.uint8), 0, 16)


def test_empty_and_oversize_batches():
    ex = SyntheticLatency(1.0)
    with pytest.raises(ShapeMismatch):
        ex.execute([])
    small = SyntheticLatency(1.0, max_batch=4)
    with pytest.raises(BatchTooLarge):
        small.execute([np.zeros(1, np.float32)] * 5)


def test_input_spec_enforced():
    ex = HistogramEmbedding(input_spec=TensorSpec("u8", ("batch", 4, 4, 3)))
    with pytest.raises(ShapeMismatch):
        ex.execute([np.zeros((5, 4, 3), np.uint8)])
    with pytest.raises(ShapeMismatch):
        ex.execute([np.zeros((4, 4, 3), np.float32)])


def test_synthetic_latency_polynomial():
    ex = SyntheticLatency(a_ms=8, s_ms=0.5, q_ms=0.05)
    assert ex.model_ms(4) == pytest.approx(8 + 2 + 0.8)
    t0 = time.perf_counter()
    outs = ex.execute([np.zeros(1, np.float32)] * 4)
    elapsed = (time.perf_counter() - t0) * 1000
    assert [o.predictions[0][0] for o in outs] == ["ok"] * 4
    assert 10.8 <= elapsed <= 10.8 + 2.0


def test_synthetic_params_validated():
    with pytest.raises(ValueError):
        SyntheticLatency(0.0)
    with pytest.raises(ValueError):
        SyntheticLatency(1.0, jitter_frac=0.6)


def test_build_from_config_blob():
    spec = TensorSpec("f32", ("batch", 8, 8, 3))
    m = ModelManifest("e", "e", "embedding", spec, TensorSpec("f32", ("batch", 64)))
    ex = build_executor(m, executor_config(HistogramEmbedding(seed=5, dim=64)))
    assert (ex.seed, ex.dim, ex.input_spec) == (5, 64, spec)
    s = build_executor(m, executor_config(SyntheticLatency(3.0, 1.0, 0.1)))
    assert (s.a_ms, s.s_ms, s.q_ms) == (3.0, 1.0, 0.1)
