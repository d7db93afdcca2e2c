import numpy as np
import pytest

from atriaseg.errors import IntegrityError, ShapeError
from atriaseg.preprocess import (
    Slice2D,
    crop_back,
    extract_slices,
    normalize_intensity,
    pad_to_multiple_of_32,
)
from atriaseg.volume_io import CaseRecord, LabelVolume, Volume3D


def reflect_index(i, n):
    """Independent reflect rule: mirror without repeating the edge, period 2(n-1)."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = abs(i) % period
    return period - i if i >= n else i


def oracle_reflect_pad(arr, pads):
    (top, bottom), (left, right) = pads
    h, w = arr.shape
    out = np.empty((h + top + bottom, w + left + right), dtype=arr.dtype)
    for r in range(out.shape[0]):
        for c in range(out.shape[1]):
            out[r, c] = arr[reflect_index(r - top, h), reflect_index(c - left, w)]
    return out


def test_normalize_constant_slice_is_zero():
    s = Slice2D(pixels=np.full((4, 4), 5.0, dtype=np.float32))
    out = normalize_intensity(s)
    assert np.array_equal(out.pixels, np.zeros((4, 4), dtype=np.float32))


def test_normalize_two_point_slice():
    s = Slice2D(pixels=np.array([[0.0, 2.0]], dtype=np.float32))
    out = normalize_intensity(s)
    assert np.allclose(out.pixels, [[-1.0, 1.0]])


def test_normalize_moments_random_slice():
    rng = np.random.default_rng(1)
    s = Slice2D(pixels=(rng.normal(3.0, 7.0, size=(64, 64)).astype(np.float32)))
    out = normalize_intensity(s)
    # recompute moments independently in float64, population std
    p = out.pixels.astype(np.float64)
    assert abs(p.mean()) < 1e-5
    assert abs(p.std() - 1.0) < 1e-5


def test_normalize_idempotent():
    rng = np.random.default_rng(2)
    s = Slice2D(pixels=rng.random((32, 48)).astype(np.float32) * 100)
    once = normalize_intensity(s)
    twice = normalize_intensity(once)
    assert np.allclose(twice.pixels, once.pixels, atol=1e-5)


def test_pad_576_is_noop():
    s = Slice2D(pixels=np.zeros((576, 576), dtype=np.float32))
    out = pad_to_multiple_of_32(s)
    assert out.pixels.shape == (576, 576)
    assert out.pad_record == (0, 0, 0, 0)


def test_pad_600_to_608_symmetric():
    rng = np.random.default_rng(3)
    s = Slice2D(pixels=rng.random((600, 600)).astype(np.float32))
    out = pad_to_multiple_of_32(s)
    assert out.pixels.shape == (608, 608)
    assert out.pad_record == (4, 4, 4, 4)
    assert np.array_equal(out.pixels[4:-4, 4:-4], s.pixels)


def test_pad_uses_reflect_without_edge_repeat():
    # [a, b, c] padded right by 2 must give [a, b, c, b, a]
    for h, w in [(2, 3), (3, 5)]:
        rng = np.random.default_rng(h * 10 + w)
        s = Slice2D(pixels=rng.random((h, w)).astype(np.float32))
        out = pad_to_multiple_of_32(s)
        top, bottom, left, right = out.pad_record
        expected = oracle_reflect_pad(s.pixels, ((top, bottom), (left, right)))
        assert np.array_equal(out.pixels, expected)


def test_pad_mask_forced_to_background():
    s = Slice2D(
        pixels=np.ones((40, 40), dtype=np.float32),
        mask=np.ones((40, 40), dtype=np.uint8),
    )
    out = pad_to_multiple_of_32(s)
    assert out.pixels.shape == (64, 64)
    top, bottom, left, right = out.pad_record
    assert out.mask[top:-bottom, left:-right].all()
    assert out.mask.sum() == 40 * 40  # nothing outside the original extent


def test_pad_needs_two_samples():
    s = Slice2D(pixels=np.zeros((1, 40), dtype=np.float32))
    with pytest.raises(ShapeError):
        pad_to_multiple_of_32(s)


def test_extract_slices_counts_and_labels():
    vol = Volume3D(voxels=np.zeros((3, 4, 4), dtype=np.float32))
    mask = LabelVolume(voxels=np.zeros((3, 4, 4), dtype=np.uint8))
    case = CaseRecord(case_id="c", volume_path="v", mask_path="m", ablation="post")
    slices = extract_slices(case, vol, mask)
    assert len(slices) == 3
    assert all(s.pixels.shape == (4, 4) for s in slices)
    assert all(s.ablation_label == 1 for s in slices)
    assert [s.source for s in slices] == [("c", 0), ("c", 1), ("c", 2)]

    case_pre = CaseRecord(case_id="c", volume_path="v", ablation="pre")
    assert all(s.ablation_label == 0 for s in extract_slices(case_pre, vol))


def test_extract_slices_layout_probe():
    # single-hot voxel at (x=1, y=2, z=0) appears in slice 0 at [y=2, x=1]
    voxels = np.zeros((3, 4, 4), dtype=np.float32)
    voxels[0, 2, 1] = 1.0
    vol = Volume3D(voxels=voxels)
    case = CaseRecord(case_id="c", volume_path="v", ablation="pre")
    slices = extract_slices(case, vol)
    assert slices[0].pixels[2, 1] == 1.0
    assert slices[0].pixels.sum() == 1.0
    assert slices[1].pixels.sum() == 0.0
    assert slices[2].pixels.sum() == 0.0


def test_extract_slices_dims_mismatch():
    vol = Volume3D(voxels=np.zeros((3, 4, 4), dtype=np.float32))
    mask = LabelVolume(voxels=np.zeros((2, 4, 4), dtype=np.uint8))
    case = CaseRecord(case_id="c", volume_path="v", mask_path="m", ablation="pre")
    with pytest.raises(IntegrityError):
        extract_slices(case, vol, mask)


def test_crop_back_zero_pad_identity():
    arr = np.arange(12, dtype=np.float32).reshape(3, 4)
    assert np.array_equal(crop_back(arr, (0, 0, 0, 0)), arr)


def test_crop_back_inverse_of_pad():
    pred = np.zeros((608, 608), dtype=np.uint8)
    out = crop_back(pred, (4, 4, 4, 4))
    assert out.shape == (600, 600)


def test_pad_crop_round_trip_fuzz():
    rng = np.random.default_rng(4)
    sizes = [(576, 576), (600, 600)] + [
        (int(rng.integers(2, 200)), int(rng.integers(2, 200))) for _ in range(48)
    ]
    for h, w in sizes:
        pixels = rng.random((h, w)).astype(np.float32)
        mask = (rng.random((h, w)) < 0.4).astype(np.uint8)
        padded = pad_to_multiple_of_32(Slice2D(pixels=pixels, mask=mask))
        assert padded.pixels.shape[0] % 32 == 0 and padded.pixels.shape[1] % 32 == 0
        assert np.array_equal(crop_back(padded.pixels, padded.pad_record), pixels)
        assert np.array_equal(crop_back(padded.mask, padded.pad_record), mask)


def test_crop_back_inconsistent_record():
    arr = np.zeros((8, 8), dtype=np.float32)
    with pytest.raises(IntegrityError):
        crop_back(arr, (-1, 0, 0, 0))
    with pytest.raises(IntegrityError):
        crop_back(arr, (4, 4, 0, 0))


def test_slice_count_conservation():
    rng = np.random.default_rng(5)
    total = 0
    expected = 0
    for i in range(5):
        nz = int(rng.integers(1, 7))
        vol = Volume3D(voxels=rng.random((nz, 4, 4)).astype(np.float32))
        case = CaseRecord(case_id=f"c{i}", volume_path="v", ablation="pre")
        total += len(extract_slices(case, vol))
        expected += nz
    assert total == expected
