"""Synthetic 3D phantoms: bright ellipsoidal blobs with protruding tubes.

Each case renders an analytic ellipsoid plus a few capsule-shaped tubes at
elevated intensity over a noisy background, so the ground-truth mask is exact
by construction and forms a single connected component. Post-ablation cases
additionally carry a dark multiplicative speckle texture inside the
foreground, giving the classification branch a learnable cue. A per-case
global gamma-like shift varies image contrast across the set.

Everything is drawn from per-case generators derived from the spec seed, so
a dataset regenerates byte-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ConfigurationError
from .volume_io import (
    POST,
    PRE,
    CaseRecord,
    LabelVolume,
    Volume3D,
    save_manifest,
    save_volume,
)


@dataclass
class PhantomSpec:
    n_cases: int = 20
    dims: tuple[int, int, int] = (64, 64, 16)  # (nx, ny, nz)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    blob_radius_xy: tuple[float, float] = (10.0, 16.0)
    blob_radius_z: tuple[float, float] = (4.0, 6.5)
    n_tubes: tuple[int, int] = (2, 5)
    tube_radius: tuple[float, float] = (1.6, 2.4)
    tube_length: tuple[float, float] = (5.0, 12.0)
    fg_level: tuple[float, float] = (0.75, 1.0)  # per-case foreground intensity
    bg_level: float = 0.15
    noise_sigma: float = 0.04
    contrast_gamma: tuple[float, float] = (0.8, 1.6)  # global per-case contrast shift
    post_ablation_fraction: float = 0.5
    speckle_prob: float = 0.5  # fraction of foreground voxels darkened (POST only)
    speckle_depth: float = 0.5  # relative darkening of speckled voxels
    seed: int = 0

    def validate(self) -> None:
        if self.n_cases < 1:
            raise ConfigurationError(f"n_cases must be >= 1, got {self.n_cases}")
        if min(self.dims) < 4:
            raise ConfigurationError(f"phantom dims too small: {self.dims}")
        for frac in (self.post_ablation_fraction, self.speckle_prob, self.speckle_depth):
            if not 0.0 <= frac <= 1.0:
                raise ConfigurationError(f"fractions must be in [0,1], got {frac}")
        if self.n_tubes[0] < 0 or self.n_tubes[0] > self.n_tubes[1]:
            raise ConfigurationError(f"invalid tube count range {self.n_tubes}")


def make_case(spec: PhantomSpec, rng: np.random.Generator, is_post: bool) -> tuple[Volume3D, LabelVolume]:
    """Render one phantom; mask is the exact analytic blob-plus-tubes region."""
    nx, ny, nz = spec.dims
    zz, yy, xx = np.meshgrid(
        np.arange(nz, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nx, dtype=np.float64),
        indexing="ij",
    )

    center = np.array(
        [
            nx / 2.0 + rng.uniform(-2.0, 2.0),
            ny / 2.0 + rng.uniform(-2.0, 2.0),
            nz / 2.0 + rng.uniform(-1.0, 1.0),
        ]
    )
    semi = np.array(
        [
            rng.uniform(*spec.blob_radius_xy),
            rng.uniform(*spec.blob_radius_xy),
            rng.uniform(*spec.blob_radius_z),
        ]
    )
    mask = (
        ((xx - center[0]) / semi[0]) ** 2
        + ((yy - center[1]) / semi[1]) ** 2
        + ((zz - center[2]) / semi[2]) ** 2
    ) <= 1.0

    n_tubes = int(rng.integers(spec.n_tubes[0], spec.n_tubes[1] + 1))
    points = np.stack([xx, yy, zz], axis=-1)
    for _ in range(n_tubes):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        direction = np.array([math.cos(theta), math.sin(theta), rng.uniform(-0.3, 0.3)])
        direction /= np.linalg.norm(direction)
        # distance from center to the ellipsoid surface along this direction
        t_surf = 1.0 / math.sqrt(float(np.sum((direction / semi) ** 2)))
        length = rng.uniform(*spec.tube_length)
        radius = rng.uniform(*spec.tube_radius)
        p0 = center + 0.7 * t_surf * direction  # starts inside the blob: stays attached
        p1 = center + (t_surf + length) * direction
        mask |= _capsule(points, p0, p1, radius)

    img = rng.normal(spec.bg_level, spec.noise_sigma, size=(nz, ny, nx))
    fg = rng.uniform(*spec.fg_level)
    n_fg = int(mask.sum())
    values = fg + rng.normal(0.0, spec.noise_sigma, size=n_fg)
    if is_post and spec.speckle_depth > 0.0:
        speckled = rng.random(n_fg) < spec.speckle_prob
        values[speckled] *= 1.0 - spec.speckle_depth
    img[mask] = values

    img = np.maximum(img, 0.0)
    gamma = rng.uniform(*spec.contrast_gamma)
    peak = img.max()
    if peak > 0:
        img = (img / peak) ** (1.0 / gamma) * peak

    return (
        Volume3D(voxels=img.astype(np.float32), spacing=spec.spacing),
        LabelVolume(voxels=mask.astype(np.uint8), spacing=spec.spacing),
    )


def _capsule(points: np.ndarray, p0: np.ndarray, p1: np.ndarray, radius: float) -> np.ndarray:
    """Voxels within `radius` of the segment p0-p1 (points has shape (...,3) in xyz)."""
    axis = p1 - p0
    denom = float(axis @ axis)
    rel = points - p0
    t = np.clip((rel @ axis) / denom, 0.0, 1.0)
    closest = p0 + t[..., None] * axis
    dist2 = np.sum((points - closest) ** 2, axis=-1)
    return dist2 <= radius * radius


def generate(spec: PhantomSpec, out_dir: Union[str, Path]) -> Path:
    """Write n_cases volumes/masks plus a manifest; returns the manifest path."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n_post = round(spec.post_ablation_fraction * spec.n_cases)
    assign_rng = np.random.default_rng([spec.seed, 0xA551])
    post_cases = set(assign_rng.permutation(spec.n_cases)[:n_post].tolist())

    records = []
    for i in range(spec.n_cases):
        case_id = f"case_{i:03d}"
        is_post = i in post_cases
        rng = np.random.default_rng([spec.seed, i])
        vol, mask = make_case(spec, rng, is_post)
        vol_path = out_dir / f"{case_id}_vol.avl1"
        mask_path = out_dir / f"{case_id}_mask.avl1"
        save_volume(vol, vol_path)
        save_volume(mask, mask_path)
        records.append(
            CaseRecord(
                case_id=case_id,
                volume_path=vol_path,
                mask_path=mask_path,
                ablation=POST if is_post else PRE,
            )
        )
    manifest_path = out_dir / "manifest.json"
    save_manifest(records, manifest_path)
    return manifest_path
