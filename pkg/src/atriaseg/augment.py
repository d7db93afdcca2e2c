"""Stochastic training-time transforms and the contrast-enhancement baseline.

Random flips, rotation, shift and zoom are applied identically to image and
mask (bilinear for images, nearest-neighbor for masks, reflected borders);
gamma contrast augmentation touches the image only. Draw order is fixed
(flip-H, flip-V, rotation, shift, zoom, gamma) so a seeded generator
reproduces an augmentation stream exactly.

Multi-scale central cropping with mirror padding and the small-to-large crop
curriculum live here too, together with a tile-based CLAHE used as a
contrast-enhancement baseline for comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError
from .preprocess import Slice2D, _merge_pad_records

PAPER_CROP_SIZES = (256, 384, 480, 512, 576, 640)


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    rotation_deg: tuple[float, float] = (-10.0, 10.0)
    shift_frac: float = 0.10
    zoom_range: tuple[float, float] = (0.7, 1.3)
    gamma_range: tuple[float, float] = (0.8, 2.0)
    gamma_enabled: bool = True
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigurationError(f"flip_prob must be in [0,1], got {self.flip_prob}")
        if self.rotation_deg[0] > self.rotation_deg[1]:
            raise ConfigurationError(f"empty rotation interval {self.rotation_deg}")
        if self.shift_frac < 0:
            raise ConfigurationError(f"shift_frac must be >= 0, got {self.shift_frac}")
        for name, (lo, hi) in (("zoom_range", self.zoom_range), ("gamma_range", self.gamma_range)):
            if lo <= 0:
                raise ConfigurationError(f"{name} lower bound must be > 0, got {lo}")
            if lo > hi:
                raise ConfigurationError(f"empty interval {name}={lo, hi}")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        """All transforms collapsed to no-ops; useful for tests and ablations."""
        return cls(
            flip_prob=0.0,
            rotation_deg=(0.0, 0.0),
            shift_frac=0.0,
            zoom_range=(1.0, 1.0),
            gamma_range=(1.0, 1.0),
            gamma_enabled=False,
        )


@dataclass
class CurriculumSchedule:
    """Ordered (crop_size, epoch_count) stages, small crops first."""

    stages: list[tuple[int, int]] = field(
        default_factory=lambda: [(size, 20) for size in PAPER_CROP_SIZES]
    )

    def validate(self) -> None:
        if not self.stages:
            raise ConfigurationError("curriculum schedule has no stages")
        prev = 0
        for size, epochs in self.stages:
            if size % 32 != 0 or size <= 0:
                raise ConfigurationError(f"crop size {size} is not a positive multiple of 32")
            if size < prev:
                raise ConfigurationError("curriculum crop sizes must be non-decreasing")
            if epochs < 1:
                raise ConfigurationError(f"stage epoch count must be >= 1, got {epochs}")
            prev = size


def curriculum_size_for_epoch(sched: CurriculumSchedule, epoch: int) -> int:
    """Crop size whose cumulative stage range contains `epoch` (clamped to last)."""
    if not sched.stages:
        raise ConfigurationError("curriculum schedule has no stages")
    if epoch < 0:
        raise ConfigurationError(f"epoch must be >= 0, got {epoch}")
    boundary = 0
    for size, count in sched.stages:
        boundary += count
        if epoch < boundary:
            return size
    return sched.stages[-1][0]


def gamma_correct(s: Slice2D, gamma: float) -> Slice2D:
    """Apply the power-law contrast map p -> p^(1/gamma).

    The slice is rescaled to [0,1] by its min/max before the power and
    mapped back afterwards, so the transform is well defined on normalized
    (negative-valued) data and is monotone in the input. Constant slices
    are returned unchanged.
    """
    if gamma <= 0:
        raise ConfigurationError(f"gamma must be > 0, got {gamma}")
    if gamma == 1.0:
        return replace(s)
    lo = float(s.pixels.min())
    hi = float(s.pixels.max())
    if hi == lo:
        return replace(s)
    unit = (s.pixels.astype(np.float64) - lo) / (hi - lo)
    out = lo + (hi - lo) * unit ** (1.0 / gamma)
    return replace(s, pixels=out.astype(np.float32))


def _geom(image: np.ndarray, mask: np.ndarray, op, *args, **kwargs):
    """Apply a scipy.ndimage op bilinearly to the image, nearest to the mask."""
    img = op(image, *args, order=1, mode="mirror", **kwargs)
    msk = op(mask, *args, order=0, mode="mirror", **kwargs)
    return img, msk


def random_augment(s: Slice2D, cfg: AugmentConfig, rng: np.random.Generator) -> Slice2D:
    """Draw and apply one random transform composition (training only).

    All randomness comes from `rng`, which advances; re-seeding reproduces the
    stream. Every knob is drawn even when its transform ends up a no-op so the
    stream stays aligned across configs.
    """
    if s.mask is None:
        raise ConfigurationError("random_augment requires a slice with a mask")
    cfg.validate()

    do_flip_h = rng.random() < cfg.flip_prob
    do_flip_v = rng.random() < cfg.flip_prob
    angle = float(rng.uniform(*cfg.rotation_deg))
    shift_x = float(rng.uniform(-cfg.shift_frac, cfg.shift_frac)) * s.width
    shift_y = float(rng.uniform(-cfg.shift_frac, cfg.shift_frac)) * s.height
    zoom = float(rng.uniform(*cfg.zoom_range))
    gamma = float(rng.uniform(*cfg.gamma_range))

    image = s.pixels
    mask = s.mask
    if do_flip_h:
        image = image[:, ::-1]
        mask = mask[:, ::-1]
    if do_flip_v:
        image = image[::-1, :]
        mask = mask[::-1, :]
    if angle != 0.0:
        image, mask = _geom(image, mask, ndimage.rotate, angle, reshape=False)
    if shift_x != 0.0 or shift_y != 0.0:
        image, mask = _geom(image, mask, ndimage.shift, (shift_y, shift_x))
    if zoom != 1.0:
        # Content scales about the slice center on a fixed canvas:
        # output(o) = input((o - c)/zoom + c).
        center = (np.asarray(image.shape, dtype=np.float64) - 1.0) / 2.0
        matrix = np.diag([1.0 / zoom, 1.0 / zoom])
        offset = center - center / zoom
        image, mask = _geom(image, mask, ndimage.affine_transform, matrix, offset=offset)

    out = replace(s, pixels=np.ascontiguousarray(image), mask=np.ascontiguousarray(mask))
    if cfg.gamma_enabled and gamma != 1.0:
        out = gamma_correct(out, gamma)
    return out


def _crop_or_pad_axis(size: int, target: int) -> tuple[slice, tuple[int, int]]:
    """Per-axis plan: a crop slice plus (before, after) pads."""
    if size >= target:
        start = (size - target) // 2
        return slice(start, start + target), (0, 0)
    total = target - size
    return slice(0, size), (total // 2, total - total // 2)


def center_crop_or_mirror_pad(s: Slice2D, size: int) -> Slice2D:
    """Return an exactly size x size slice: central crop, mirror pad, or both.

    Crops split with the floor on the top/left; pads follow the reflect rule
    with masks padded as background. pad_record accumulates signed per-edge
    deltas (negative entries mean cropped pixels).
    """
    if size <= 0:
        raise ConfigurationError(f"crop size must be positive, got {size}")
    rows, (top, bottom) = _crop_or_pad_axis(s.height, size)
    cols, (left, right) = _crop_or_pad_axis(s.width, size)

    pixels = s.pixels[rows, cols]
    mask = s.mask[rows, cols] if s.mask is not None else None
    if top or bottom or left or right:
        pixels = np.pad(pixels, ((top, bottom), (left, right)), mode="reflect")
        if mask is not None:
            mask = np.pad(mask, ((top, bottom), (left, right)), mode="constant")

    delta = (
        top - rows.start,
        bottom - (s.height - rows.stop),
        left - cols.start,
        right - (s.width - cols.stop),
    )
    record = _merge_pad_records(s.pad_record, delta)
    return replace(s, pixels=pixels, mask=mask, pad_record=record)


def clahe(s: Slice2D, tiles: tuple[int, int] = (8, 8), clip_limit: float = 2.0) -> Slice2D:
    """Contrast-limited adaptive histogram equalization over a tile grid.

    The slice is binned into 256 levels over its min-max range; each tile's
    clipped histogram (clip_limit is relative to the uniform bin height,
    math.inf disables clipping) defines a cdf mapping, and pixels blend the
    mappings of the four nearest tile centers bilinearly. Output stays within
    the input range. Constant slices are returned unchanged.
    """
    ty, tx = tiles
    if ty < 1 or tx < 1:
        raise ConfigurationError(f"tile grid must be >= 1x1, got {tiles}")
    if clip_limit <= 0:
        raise ConfigurationError(f"clip_limit must be > 0, got {clip_limit}")
    lo = float(s.pixels.min())
    hi = float(s.pixels.max())
    if hi == lo:
        return replace(s)

    bins = 256
    h, w = s.pixels.shape
    levels = ((s.pixels.astype(np.float64) - lo) / (hi - lo) * bins).astype(np.int64)
    np.clip(levels, 0, bins - 1, out=levels)

    row_edges = [(i * h) // ty for i in range(ty + 1)]
    col_edges = [(j * w) // tx for j in range(tx + 1)]
    mappings = np.zeros((ty, tx, bins), dtype=np.float64)
    for i in range(ty):
        for j in range(tx):
            tile = levels[row_edges[i] : row_edges[i + 1], col_edges[j] : col_edges[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=bins).astype(np.float64)
            if math.isfinite(clip_limit):
                limit = clip_limit * tile.size / bins
                excess = np.maximum(hist - limit, 0.0).sum()
                hist = np.minimum(hist, limit) + excess / bins
            cdf = np.cumsum(hist)
            mappings[i, j] = cdf / cdf[-1]

    # Bilinear blend between tile-center mappings, clamped at the borders.
    centers_y = np.array([(row_edges[i] + row_edges[i + 1] - 1) / 2.0 for i in range(ty)])
    centers_x = np.array([(col_edges[j] + col_edges[j + 1] - 1) / 2.0 for j in range(tx)])
    iy0, wy = _blend_coords(np.arange(h, dtype=np.float64), centers_y)
    ix0, wx = _blend_coords(np.arange(w, dtype=np.float64), centers_x)
    iy1 = np.minimum(iy0 + 1, ty - 1)
    ix1 = np.minimum(ix0 + 1, tx - 1)

    gy0, gx0 = np.meshgrid(iy0, ix0, indexing="ij")
    gy1, gx1 = np.meshgrid(iy1, ix1, indexing="ij")
    wyg, wxg = np.meshgrid(wy, wx, indexing="ij")

    out01 = (
        (1 - wyg) * (1 - wxg) * mappings[gy0, gx0, levels]
        + (1 - wyg) * wxg * mappings[gy0, gx1, levels]
        + wyg * (1 - wxg) * mappings[gy1, gx0, levels]
        + wyg * wxg * mappings[gy1, gx1, levels]
    )
    out = lo + (hi - lo) * out01
    return replace(s, pixels=out.astype(np.float32))


def _blend_coords(coords: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lower tile index and fractional weight toward the upper tile, per coord."""
    if centers.size == 1:
        return np.zeros(coords.shape, dtype=np.int64), np.zeros_like(coords)
    idx = np.searchsorted(centers, coords, side="right") - 1
    idx = np.clip(idx, 0, centers.size - 2)
    span = centers[idx + 1] - centers[idx]
    frac = (coords - centers[idx]) / span
    return idx, np.clip(frac, 0.0, 1.0)
