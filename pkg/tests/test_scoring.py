import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dictas.scoring import (
    anomaly_map,
    image_score,
    load_map_png,
    patch_distance_field,
    save_map_png,
    to_uint16_png_values,
    upsample,
)


def _stack(seed, layers=2, h=4, w=4, c=5):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(h, w, c, generator=g, dtype=torch.float64) for _ in range(layers)]


def test_identical_stacks_give_zero_map():
    q = _stack(0)
    m = anomaly_map(q, [x.clone() for x in q], (32, 32))
    assert m.shape == (32, 32) and not m.any()


def test_antipodal_stacks_give_ones():
    q = _stack(1)
    m = anomaly_map(q, [-x for x in q], (32, 32), smooth_sigma=None)
    assert np.array_equal(m, np.ones((32, 32)))
    assert np.allclose(anomaly_map(q, [-x for x in q], (32, 32)), 1.0, atol=1e-12)


def test_two_layer_hand_value():
    q = [torch.tensor([[[1.0, 0.0]]]), torch.tensor([[[1.0, 0.0]]])]
    r = [torch.tensor([[[2.0, 0.0]]]), torch.tensor([[[0.0, 3.0]]])]
    assert patch_distance_field(q, r).item() == 0.25


def test_no_smoothing_at_patch_resolution_is_raw_field():
    q, r = _stack(2), _stack(3)
    raw = patch_distance_field(q, r).numpy()
    assert np.array_equal(anomaly_map(q, r, (4, 4), smooth_sigma=None), raw)


def test_batched_maps():
    q = [torch.randn(3, 4, 4, 5) for _ in range(2)]
    r = [torch.randn(3, 4, 4, 5) for _ in range(2)]
    m = anomaly_map(q, r, (16, 16))
    assert m.shape == (3, 16, 16)
    assert np.allclose(m[1], anomaly_map([x[1] for x in q], [x[1] for x in r], (16, 16)))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        anomaly_map(_stack(0), _stack(0, h=3), (8, 8))
    with pytest.raises(ValueError):
        anomaly_map(_stack(0), _stack(0, layers=1), (8, 8))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([None, 2.0, 4.0]))
def test_map_within_unit_interval(seed, sigma):
    q, r = _stack(seed, layers=3), _stack(seed + 1, layers=3)
    m = anomaly_map(q, r, (24, 20), smooth_sigma=sigma)
    assert m.min() >= -1e-6 and m.max() <= 1 + 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([None, 4.0]))
def test_map_monotone_in_patch_distance(seed, sigma):
    rng = np.random.default_rng(seed)
    field = torch.from_numpy(rng.random((5, 5)))
    bumped = field.clone()
    bumped[rng.integers(5), rng.integers(5)] += rng.random()
    a = upsample(field, (30, 30)).numpy()
    b = upsample(bumped, (30, 30)).numpy()
    if sigma:
        from dictas.scoring import smooth

        a, b = smooth(a, sigma), smooth(b, sigma)
    assert (b >= a - 1e-12).all()


def test_image_score_is_max():
    assert image_score(np.zeros((4, 4))) == 0.0
    m = np.zeros((4, 4))
    m[2, 1] = 0.9
    assert image_score(m) == 0.9
    a, b = np.full((4, 4), 0.1), np.zeros((4, 4))
    a[0, 0] = b[3, 3] = 0.7
    assert image_score(a) == image_score(b)
    with pytest.raises(ValueError):
        image_score(np.zeros((0,)))


def test_png_round_trip(tmp_path):
    m = np.random.default_rng(0).random((20, 30))
    path = tmp_path / "a" / "b.png"
    save_map_png(path, m)
    back = load_map_png(path)
    assert np.array_equal(np.round(back * 65535).astype(np.uint16), to_uint16_png_values(m))
    assert np.abs(back - m).max() <= 0.5 / 65535 + 1e-12
