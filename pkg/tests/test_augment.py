import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastscnn.augment import (
    AugmentConfig,
    Sample,
    augment,
    brightness,
    color_noise,
    hflip,
    nearest_indices,
    random_crop,
    random_hflip,
    random_resize,
    sample_rng,
)


def make_sample(rng, h=16, w=24, k=3):
    return Sample(rng.standard_normal((1, 3, h, w)).astype(np.float32), rng.integers(0, k, (1, h, w)))


def test_sample_rejects_mismatched_sizes():
    with pytest.raises(ValueError):
        Sample(np.zeros((1, 3, 4, 4)), np.zeros((1, 4, 5)))


def test_resize_unit_scale_is_identity(rng):
    s = make_sample(rng)
    out = random_resize(s, rng, scale=1.0)
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.label, s.label)


def test_resize_double_keeps_label_values(rng):
    s = make_sample(rng, 128, 256)
    out = random_resize(s, rng, scale=2.0)
    assert out.size == (256, 512)
    assert set(np.unique(out.label)) <= set(np.unique(s.label))


def test_resize_half_checkerboard_against_index_oracle():
    h, w = 8, 12
    label = ((np.arange(h)[:, None] + np.arange(w)[None, :]) % 2)[None]
    s = Sample(np.zeros((1, 3, h, w), np.float32), label)
    out = random_resize(s, np.random.default_rng(0), scale=0.5)
    for y in range(4):
        for x in range(6):
            sy = min(int((y + 0.5) * h / 4), h - 1)
            sx = min(int((x + 0.5) * w / 6), w - 1)
            assert out.label[0, y, x] == label[0, sy, sx]


@given(n_in=st.integers(1, 50), n_out=st.integers(1, 100))
def test_nearest_indices_in_range(n_in, n_out):
    idx = nearest_indices(n_in, n_out)
    assert idx.min() >= 0 and idx.max() < n_in and np.all(np.diff(idx) >= 0)


def test_crop_same_size_is_identity(rng):
    s = make_sample(rng)
    out = random_crop(s, 16, 24, rng)
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.label, s.label)


def test_crop_larger_pads_with_ignore(rng):
    s = make_sample(rng, 4, 6)
    out = random_crop(s, 8, 10, rng)
    assert out.size == (8, 10)
    assert np.all(out.label[:, 4:] == 255) and np.all(out.label[:, :, 6:] == 255)
    assert not out.image[:, :, 4:].any()


def test_crop_is_deterministic_for_a_seed(rng):
    s = make_sample(rng, 32, 32)
    a = random_crop(s, 8, 8, np.random.default_rng(5))
    b = random_crop(s, 8, 8, np.random.default_rng(5))
    np.testing.assert_array_equal(a.image, b.image)


def test_double_flip_is_identity_and_joint(rng):
    s = make_sample(rng)
    twice = hflip(hflip(s))
    np.testing.assert_array_equal(twice.image, s.image)
    np.testing.assert_array_equal(twice.label, s.label)
    np.testing.assert_array_equal(hflip(s).label, s.label[..., ::-1])


def test_photometric_identity_settings(rng):
    s = make_sample(rng)
    assert color_noise(s, 0.0, rng).image is s.image
    assert brightness(s, (1.0, 1.0), rng).image is s.image


def test_photometric_ops_leave_labels(rng):
    s = make_sample(rng)
    assert color_noise(s, 0.1, rng).label is s.label
    out = brightness(s, (0.5, 0.5), rng)
    assert out.label is s.label
    np.testing.assert_allclose(out.image, s.image * 0.5)


def test_flip_probability_extremes(rng):
    s = make_sample(rng)
    np.testing.assert_array_equal(random_hflip(s, rng, 1.0).label, s.label[..., ::-1])
    assert random_hflip(s, rng, 0.0) is s


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), index=st.integers(0, 100), h=st.integers(8, 40), w=st.integers(8, 40))
def test_pipeline_output_size_and_purity(seed, index, h, w):
    s = make_sample(np.random.default_rng(index), h, w)
    cfg = AugmentConfig(crop=(16, 24))
    a = augment(s, cfg, sample_rng(seed, 0, index))
    b = augment(s, cfg, sample_rng(seed, 0, index))
    assert a.size == (16, 24)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.label, b.label)
    assert set(np.unique(a.label)) <= set(np.unique(s.label)) | {255}


def test_geometric_ops_move_image_and_label_together():
    # label encodes the pixel's own image value, so any misalignment shows up
    h, w = 20, 30
    values = np.arange(h * w).reshape(h, w) % 250
    image = np.broadcast_to(values, (1, 3, h, w)).astype(np.float32)
    s = Sample(image.copy(), values[None].astype(np.int64))
    cfg = AugmentConfig(crop=(12, 16), noise_std=0.0, gain_range=(1.0, 1.0), scale_range=(1.0, 1.0))
    for i in range(10):
        out = augment(s, cfg, sample_rng(0, 0, i))
        valid = out.label != 255
        np.testing.assert_array_equal(out.image[:, 0][valid], out.label[valid])
