import math

import numpy as np
import pytest

from atriaseg.augment import (
    AugmentConfig,
    CurriculumSchedule,
    center_crop_or_mirror_pad,
    clahe,
    curriculum_size_for_epoch,
    gamma_correct,
    random_augment,
)
from atriaseg.errors import ConfigurationError
from atriaseg.preprocess import Slice2D

from oracles import histogram_equalize, oracle_reflect_pad


def make_slice(pixels, mask=None):
    return Slice2D(pixels=np.asarray(pixels, dtype=np.float32),
                   mask=None if mask is None else np.asarray(mask, dtype=np.uint8))


def disk_slice(n=64, radius=18):
    yy, xx = np.mgrid[:n, :n]
    disk = ((yy - n / 2) ** 2 + (xx - n / 2) ** 2 <= radius**2)
    return make_slice(disk.astype(np.float32), disk.astype(np.uint8))


# ---------------------------------------------------------------------------
# gamma correction
# ---------------------------------------------------------------------------

def test_gamma_one_is_identity():
    rng = np.random.default_rng(0)
    s = make_slice(rng.normal(size=(16, 16)))
    out = gamma_correct(s, 1.0)
    assert np.array_equal(out.pixels, s.pixels)


def test_gamma_exact_power():
    s = make_slice([[0.0, 0.25, 1.0]])
    out = gamma_correct(s, 2.0)
    assert out.pixels[0, 1] == pytest.approx(0.5, abs=1e-7)


def test_gamma_fixed_points():
    s = make_slice([[0.0, 0.3, 1.0]])
    for gamma in (0.5, 0.8, 1.7, 3.0):
        out = gamma_correct(s, gamma)
        assert out.pixels[0, 0] == 0.0
        assert out.pixels[0, 2] == 1.0


def test_gamma_monotone_on_random_pairs():
    rng = np.random.default_rng(1)
    values = rng.random(2000).astype(np.float32)
    s = make_slice(values.reshape(1, -1))
    out = gamma_correct(s, 1.6).pixels.ravel()
    for _ in range(1000):
        i, j = rng.integers(0, values.size, size=2)
        if values[i] <= values[j]:
            assert out[i] <= out[j]
        else:
            assert out[i] >= out[j]


def test_gamma_rejects_nonpositive():
    s = make_slice([[0.0, 1.0]])
    with pytest.raises(ConfigurationError):
        gamma_correct(s, 0.0)
    with pytest.raises(ConfigurationError):
        gamma_correct(s, -2.0)


def test_gamma_constant_slice_unchanged():
    s = make_slice(np.full((4, 4), 3.5))
    assert np.array_equal(gamma_correct(s, 2.0).pixels, s.pixels)


# ---------------------------------------------------------------------------
# random_augment
# ---------------------------------------------------------------------------

def test_identity_config_returns_input():
    s = disk_slice()
    out = random_augment(s, AugmentConfig.identity(), np.random.default_rng(0))
    assert np.array_equal(out.pixels, s.pixels)
    assert np.array_equal(out.mask, s.mask)


def test_forced_flip_is_involution():
    cfg = AugmentConfig(
        flip_prob=1.0, rotation_deg=(0.0, 0.0), shift_frac=0.0,
        zoom_range=(1.0, 1.0), gamma_range=(1.0, 1.0), gamma_enabled=False,
    )
    rng = np.random.default_rng(0)
    s = disk_slice()
    once = random_augment(s, cfg, rng)
    twice = random_augment(once, cfg, rng)
    assert np.array_equal(twice.pixels, s.pixels)
    assert np.array_equal(twice.mask, s.mask)


def test_same_seed_reproduces():
    s = disk_slice()
    cfg = AugmentConfig()
    a = random_augment(s, cfg, np.random.default_rng(1234))
    b = random_augment(s, cfg, np.random.default_rng(1234))
    assert np.array_equal(a.pixels, b.pixels)
    assert np.array_equal(a.mask, b.mask)


def test_mask_stays_binary_under_fuzz():
    rng = np.random.default_rng(5)
    cfg = AugmentConfig()
    for _ in range(10):
        s = disk_slice(radius=int(rng.integers(5, 25)))
        out = random_augment(s, cfg, rng)
        assert set(np.unique(out.mask)).issubset({0, 1})


def test_geometry_applied_identically_to_image_and_mask():
    # binary-valued image: the transformed mask must track image > 0.5
    cfg = AugmentConfig(gamma_enabled=False)
    rng = np.random.default_rng(7)
    for _ in range(5):
        s = disk_slice()
        out = random_augment(s, cfg, rng)
        thresholded = (out.pixels > 0.5).astype(np.uint8)
        agreement = (thresholded == out.mask).mean()
        assert agreement >= 0.98  # bilinear vs nearest differ only at the rim


def test_augment_requires_mask():
    s = make_slice(np.zeros((8, 8)))
    with pytest.raises(ConfigurationError):
        random_augment(s, AugmentConfig(), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# central crop / mirror pad
# ---------------------------------------------------------------------------

def test_crop_identity_at_same_size():
    s = disk_slice(n=64)
    out = center_crop_or_mirror_pad(s, 64)
    assert np.array_equal(out.pixels, s.pixels)
    assert out.pad_record == (0, 0, 0, 0)


def test_pad_576_to_640_mirrors_32_each_side():
    rng = np.random.default_rng(2)
    pixels = rng.random((576, 576)).astype(np.float32)
    s = Slice2D(pixels=pixels)
    out = center_crop_or_mirror_pad(s, 640)
    assert out.pixels.shape == (640, 640)
    assert out.pad_record == (32, 32, 32, 32)
    assert np.array_equal(out.pixels, oracle_reflect_pad(pixels, ((32, 32), (32, 32))))


def test_crop_6_to_4_takes_central_window():
    arr = np.arange(36, dtype=np.float32).reshape(6, 6)
    out = center_crop_or_mirror_pad(Slice2D(pixels=arr), 4)
    assert np.array_equal(out.pixels, arr[1:5, 1:5])


def test_crop_or_pad_always_square_of_requested_size():
    rng = np.random.default_rng(3)
    for _ in range(20):
        h = int(rng.integers(2, 100))
        w = int(rng.integers(2, 100))
        size = int(rng.integers(1, 4)) * 32
        s = Slice2D(pixels=rng.random((h, w)).astype(np.float32),
                    mask=(rng.random((h, w)) < 0.5).astype(np.uint8))
        out = center_crop_or_mirror_pad(s, size)
        assert out.pixels.shape == (size, size)
        assert out.mask.shape == (size, size)
        assert set(np.unique(out.mask)).issubset({0, 1})


def test_pad_region_mask_is_background():
    s = Slice2D(pixels=np.ones((8, 8), dtype=np.float32),
                mask=np.ones((8, 8), dtype=np.uint8))
    out = center_crop_or_mirror_pad(s, 32)
    assert out.mask.sum() == 64  # only the original 8x8 carries foreground
    top, bottom, left, right = out.pad_record
    assert out.mask[top:-bottom, left:-right].all()


# ---------------------------------------------------------------------------
# curriculum
# ---------------------------------------------------------------------------

def test_curriculum_stage_lookup():
    sched = CurriculumSchedule(stages=[(256, 2), (384, 2)])
    assert curriculum_size_for_epoch(sched, 0) == 256
    assert curriculum_size_for_epoch(sched, 1) == 256
    assert curriculum_size_for_epoch(sched, 3) == 384
    assert curriculum_size_for_epoch(sched, 99) == 384


def test_curriculum_empty_schedule_rejected():
    with pytest.raises(ConfigurationError):
        curriculum_size_for_epoch(CurriculumSchedule(stages=[]), 0)


def test_curriculum_validation():
    with pytest.raises(ConfigurationError):
        CurriculumSchedule(stages=[(384, 2), (256, 2)]).validate()  # decreasing
    with pytest.raises(ConfigurationError):
        CurriculumSchedule(stages=[(100, 2)]).validate()  # not a multiple of 32
    CurriculumSchedule(stages=[(256, 2), (256, 1), (640, 3)]).validate()


# ---------------------------------------------------------------------------
# CLAHE
# ---------------------------------------------------------------------------

def test_clahe_constant_image_unchanged():
    s = make_slice(np.full((16, 16), 2.5))
    out = clahe(s)
    assert np.array_equal(out.pixels, s.pixels)


def test_clahe_single_tile_unclipped_is_plain_he():
    rng = np.random.default_rng(4)
    pixels = rng.random((16, 16)).astype(np.float32)
    out = clahe(make_slice(pixels), tiles=(1, 1), clip_limit=math.inf)
    expected = histogram_equalize(pixels)
    assert np.allclose(out.pixels, expected, atol=1e-6)


def test_clahe_checkerboard_matches_per_tile_oracle():
    # two-level checkerboard: every 8x8 tile holds half of each level, so all
    # tile mappings coincide and the blended output equals per-tile HE
    yy, xx = np.mgrid[:16, :16]
    pixels = ((yy + xx) % 2).astype(np.float32)
    out = clahe(make_slice(pixels), tiles=(2, 2), clip_limit=math.inf)
    expected = histogram_equalize(pixels)
    assert np.allclose(out.pixels, expected, atol=1e-6)
    # frozen values from the oracle: 50/50 histogram maps low -> 0.5, high -> 1.0
    assert np.allclose(np.unique(out.pixels), [0.5, 1.0], atol=1e-6)


def test_clahe_output_within_input_range():
    rng = np.random.default_rng(6)
    for _ in range(10):
        pixels = rng.normal(size=(32, 32)).astype(np.float32) * rng.uniform(0.5, 5)
        out = clahe(make_slice(pixels), tiles=(4, 4), clip_limit=2.0)
        assert out.pixels.min() >= pixels.min() - 1e-5
        assert out.pixels.max() <= pixels.max() + 1e-5


def test_clahe_clipping_flattens_less_than_plain_he():
    # a strongly peaked histogram: clipping must keep the output closer to
    # the original than unclipped equalization
    rng = np.random.default_rng(8)
    pixels = np.concatenate([np.zeros(1000), rng.random(24)]).astype(np.float32)
    rng.shuffle(pixels)
    pixels = pixels.reshape(32, 32)
    clipped = clahe(make_slice(pixels), tiles=(1, 1), clip_limit=1.5)
    unclipped = clahe(make_slice(pixels), tiles=(1, 1), clip_limit=math.inf)
    orig = pixels.astype(np.float64)
    assert np.abs(clipped.pixels - orig).mean() < np.abs(unclipped.pixels - orig).mean()


def test_augment_config_validation():
    with pytest.raises(ConfigurationError):
        AugmentConfig(flip_prob=1.5).validate()
    with pytest.raises(ConfigurationError):
        AugmentConfig(zoom_range=(0.0, 1.0)).validate()
    with pytest.raises(ConfigurationError):
        AugmentConfig(gamma_range=(2.0, 1.0)).validate()
    AugmentConfig().validate()
