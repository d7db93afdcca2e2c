"""Deterministic per-slice preparation.

Covers z-score intensity normalization, reflect padding up to the nearest
multiple of 32 (the network downsamples by 2^5), axial slice extraction with
label propagation, and the inverse crop used to undo padding after inference.

Conventions fixed here and used everywhere:
  * normalization is per 2D slice with the population standard deviation;
    constant slices map to all zeros;
  * padding splits as evenly as possible with the extra pixel on the
    bottom/right; images reflect without repeating the edge pixel
    ([a,b,c] padded by 2 on the right gives [a,b,c,b,a]); mask padding is
    filled with background so reflected anatomy never enters the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import IntegrityError, ShapeError
from .volume_io import POST, CaseRecord, LabelVolume, Volume3D

PadRecord = tuple[int, int, int, int]  # (top, bottom, left, right); negative = cropped


@dataclass
class Slice2D:
    """One axial slice plus its training labels and geometry bookkeeping."""

    pixels: np.ndarray  # (h, w) float32
    mask: Optional[np.ndarray] = None  # (h, w) uint8 in {0, 1}
    ablation_label: Optional[int] = None  # 1 = post-ablation
    source: Optional[tuple[str, int]] = None  # (case_id, z index)
    pad_record: PadRecord = (0, 0, 0, 0)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ShapeError(f"slice pixels must be 2D, got shape {self.pixels.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.uint8)
            if self.mask.shape != self.pixels.shape:
                raise ShapeError(
                    f"mask shape {self.mask.shape} != pixels shape {self.pixels.shape}"
                )

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def normalize_intensity(s: Slice2D) -> Slice2D:
    """Z-score the slice to zero mean / unit population std.

    A constant slice (zero variance) maps to all zeros, the limit of the
    z-score. Accumulation is done in float64, output is float32.
    """
    p = s.pixels.astype(np.float64)
    mean = p.mean()
    std = p.std()
    if std == 0.0:
        out = np.zeros_like(s.pixels)
    else:
        out = ((p - mean) / std).astype(np.float32)
    return replace(s, pixels=out)


def _pad_amounts(size: int, multiple: int = 32) -> tuple[int, int]:
    target = ((size + multiple - 1) // multiple) * multiple
    total = target - size
    return total // 2, total - total // 2


def pad_to_multiple_of_32(s: Slice2D) -> Slice2D:
    """Reflect-pad the slice so both dims are the next multiples of 32.

    Masks are padded with zeros. The applied pads are accumulated into
    pad_record so crop_back can restore the original extent.
    """
    top, bottom = _pad_amounts(s.height)
    left, right = _pad_amounts(s.width)
    if (top, bottom, left, right) == (0, 0, 0, 0):
        return replace(s)
    if (s.height < 2 and top + bottom > 0) or (s.width < 2 and left + right > 0):
        raise ShapeError(
            f"reflect padding needs at least 2 samples per padded axis, "
            f"got {s.height}x{s.width}"
        )
    pixels = np.pad(s.pixels, ((top, bottom), (left, right)), mode="reflect")
    mask = None
    if s.mask is not None:
        mask = np.pad(s.mask, ((top, bottom), (left, right)), mode="constant")
    record = _merge_pad_records(s.pad_record, (top, bottom, left, right))
    return replace(s, pixels=pixels, mask=mask, pad_record=record)


def _merge_pad_records(old: PadRecord, delta: PadRecord) -> PadRecord:
    return tuple(o + d for o, d in zip(old, delta))  # type: ignore[return-value]


def crop_back(pred: np.ndarray, pad_record: PadRecord) -> np.ndarray:
    """Undo pad_to_multiple_of_32 on a prediction array.

    pad_record must contain non-negative pads strictly smaller than the
    padded extent; anything else is inconsistent.
    """
    top, bottom, left, right = pad_record
    if min(pad_record) < 0:
        raise IntegrityError(f"pad_record {pad_record} contains crops; cannot restore")
    h, w = pred.shape[:2]
    if top + bottom >= h or left + right >= w:
        raise IntegrityError(f"pad_record {pad_record} exceeds prediction shape {(h, w)}")
    return pred[top : h - bottom, left : w - right]


def extract_slices(
    case: CaseRecord, vol: Volume3D, mask: Optional[LabelVolume] = None
) -> list[Slice2D]:
    """Split a volume into its nz axial slices, preserving z order.

    Every slice inherits the case ablation status (1 for post-ablation).
    """
    if mask is not None and mask.dims != vol.dims:
        raise IntegrityError(
            f"case {case.case_id!r}: mask dims {mask.dims} != volume dims {vol.dims}"
        )
    label = None
    if case.ablation is not None:
        label = 1 if case.ablation == POST else 0
    nz = vol.voxels.shape[0]
    slices = []
    for z in range(nz):
        slices.append(
            Slice2D(
                pixels=vol.voxels[z].copy(),
                mask=mask.voxels[z].copy() if mask is not None else None,
                ablation_label=label,
                source=(case.case_id, z),
            )
        )
    return slices
