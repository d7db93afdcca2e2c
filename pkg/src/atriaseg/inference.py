"""Slice-wise prediction, 3D morphological refinement, ensemble averaging.

A volume is segmented by normalizing and reflect-padding each axial slice,
running the network in eval mode, cropping the softmax foreground probability
back to the original extent and stacking along z. Ensembles average per-voxel
probabilities (and per-slice classification probabilities) arithmetically
over models before any thresholding.

Post-processing refines the thresholded mask with a 3D morphological closing
followed by largest-connected-component selection. The erosion half of the
closing treats out-of-bounds voxels as foreground so closing never removes
mask voxels (extensivity holds at volume borders too).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigurationError, IntegrityError, ShapeError
from .network import MultiTaskUNet
from .preprocess import Slice2D, crop_back, normalize_intensity, pad_to_multiple_of_32
from .volume_io import POST, PRE, LabelVolume, Volume3D

ModelOrEnsemble = Union[MultiTaskUNet, Sequence[MultiTaskUNet]]


@dataclass(frozen=True)
class ProbabilityVolume:
    """Per-voxel foreground probability with the source volume's geometry."""

    values: np.ndarray  # (nz, ny, nx) float32 in [0, 1]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        object.__setattr__(self, "values", v)
        if v.ndim != 3:
            raise ShapeError(f"probability volume must be 3D, got shape {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise IntegrityError("probabilities outside [0, 1]")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.values.shape
        return (nx, ny, nz)


@dataclass(frozen=True)
class StructuringElement:
    """3x3x3 binary neighborhood; must contain the center and be symmetric."""

    array: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.array, dtype=bool)
        object.__setattr__(self, "array", a)
        if a.shape != (3, 3, 3):
            raise ConfigurationError(f"structuring element must be 3x3x3, got {a.shape}")
        if not a[1, 1, 1]:
            raise ConfigurationError("structuring element must contain its center")
        if not np.array_equal(a, a[::-1, ::-1, ::-1]):
            raise ConfigurationError("structuring element must be symmetric under negation")

    @classmethod
    def cross(cls) -> "StructuringElement":
        """Face neighbors plus center (6-connected)."""
        return cls(ndimage.generate_binary_structure(3, 1))

    @classmethod
    def full(cls) -> "StructuringElement":
        """All 26 neighbors plus center."""
        return cls(ndimage.generate_binary_structure(3, 3))


def _models(model: ModelOrEnsemble) -> list[MultiTaskUNet]:
    models = list(model) if isinstance(model, (list, tuple)) else [model]
    if not models:
        raise ConfigurationError("empty model ensemble")
    return models


def _prepare_batch(vol: Volume3D) -> tuple[torch.Tensor, tuple[int, int, int, int]]:
    slices = []
    pad_record = (0, 0, 0, 0)
    for z in range(vol.voxels.shape[0]):
        s = pad_to_multiple_of_32(normalize_intensity(Slice2D(pixels=vol.voxels[z])))
        pad_record = s.pad_record
        slices.append(s.pixels)
    x = np.stack(slices)[:, None].astype(np.float32)
    return torch.from_numpy(x), pad_record


def _forward_volume(
    model: ModelOrEnsemble, vol: Volume3D, batch_size: int = 16
) -> tuple[np.ndarray, float]:
    """Mean foreground probability per voxel and mean classification
    probability per case, over all models and slices."""
    models = _models(model)
    x, pad_record = _prepare_batch(vol)
    nz = x.shape[0]
    prob_sum = np.zeros((nz,) + tuple(x.shape[-2:]), dtype=np.float64)
    cls_sum = 0.0
    with torch.no_grad():
        for net in models:
            net.eval()
            for lo in range(0, nz, batch_size):
                out = net(x[lo : lo + batch_size])
                fg = torch.softmax(out.seg_logits, dim=1)[:, 1]
                prob_sum[lo : lo + batch_size] += fg.numpy().astype(np.float64)
                cls_sum += float(torch.sigmoid(out.class_logit).sum())
    probs = prob_sum / len(models)
    cropped = np.stack([crop_back(probs[z], pad_record) for z in range(nz)])
    cls_prob = cls_sum / (len(models) * nz)
    return np.clip(cropped, 0.0, 1.0).astype(np.float32), cls_prob


def predict_volume(model: ModelOrEnsemble, vol: Volume3D, batch_size: int = 16) -> ProbabilityVolume:
    """Slice-wise eval-mode forward; output dims equal input dims."""
    probs, _ = _forward_volume(model, vol, batch_size)
    return ProbabilityVolume(values=probs, spacing=vol.spacing)


def classify_case(model: ModelOrEnsemble, vol: Volume3D, batch_size: int = 16) -> tuple[float, str]:
    """Mean sigmoid probability over slices and models; POST iff mean > 0.5."""
    _, cls_prob = _forward_volume(model, vol, batch_size)
    return cls_prob, (POST if cls_prob > 0.5 else PRE)


def run_case(
    model: ModelOrEnsemble, vol: Volume3D, batch_size: int = 16
) -> tuple[ProbabilityVolume, float, str]:
    """Segmentation probabilities and classification in one forward pass."""
    probs, cls_prob = _forward_volume(model, vol, batch_size)
    pv = ProbabilityVolume(values=probs, spacing=vol.spacing)
    return pv, cls_prob, (POST if cls_prob > 0.5 else PRE)


def threshold_argmax(p: ProbabilityVolume) -> LabelVolume:
    """Foreground wherever its probability exceeds 0.5; exact ties stay background."""
    return LabelVolume(voxels=(p.values > 0.5).astype(np.uint8), spacing=p.spacing)


def dilate(m: LabelVolume, se: StructuringElement, iterations: int = 1) -> LabelVolume:
    out = ndimage.binary_dilation(m.voxels.astype(bool), structure=se.array, iterations=iterations)
    return LabelVolume(voxels=out.astype(np.uint8), spacing=m.spacing)


def erode(m: LabelVolume, se: StructuringElement, iterations: int = 1, border_value: int = 0) -> LabelVolume:
    out = ndimage.binary_erosion(
        m.voxels.astype(bool), structure=se.array, iterations=iterations,
        border_value=border_value,
    )
    return LabelVolume(voxels=out.astype(np.uint8), spacing=m.spacing)


def morphological_close(
    m: LabelVolume, se: StructuringElement | None = None, iterations: int = 1
) -> LabelVolume:
    """Dilation then erosion; fills holes/gaps smaller than the element.

    The volume is embedded in `iterations` voxels of background padding
    before dilating so nothing clips at the array boundary; the result is
    the true closing of the mask on an unbounded background, which always
    contains the input (extensivity) with no border artifacts.
    """
    if iterations < 1:
        raise ConfigurationError(f"iterations must be >= 1, got {iterations}")
    se = se or StructuringElement.cross()
    k = iterations
    padded = np.pad(m.voxels.astype(bool), k, mode="constant", constant_values=False)
    closed = ndimage.binary_erosion(
        ndimage.binary_dilation(padded, structure=se.array, iterations=k),
        structure=se.array,
        iterations=k,
    )
    out = closed[k:-k, k:-k, k:-k]
    return LabelVolume(voxels=out.astype(np.uint8), spacing=m.spacing)


def largest_connected_component(m: LabelVolume, connectivity: int = 6) -> LabelVolume:
    """Keep only the largest foreground component (ties: earliest raster voxel)."""
    structure = _connectivity_structure(connectivity)
    labels, n = ndimage.label(m.voxels, structure=structure)
    if n == 0:
        return LabelVolume(voxels=np.zeros_like(m.voxels), spacing=m.spacing)
    counts = np.bincount(labels.ravel())[1:]
    # scipy assigns labels in raster order, so argmax resolves ties toward
    # the component whose first voxel has the smallest linear index
    keep = int(np.argmax(counts)) + 1
    return LabelVolume(voxels=(labels == keep).astype(np.uint8), spacing=m.spacing)


def _connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ConfigurationError(f"connectivity must be 6 or 26, got {connectivity}")


def postprocess(
    p: ProbabilityVolume,
    se: StructuringElement | None = None,
    iterations: int = 1,
    connectivity: int = 6,
) -> LabelVolume:
    """threshold_argmax -> morphological_close -> largest_connected_component."""
    mask = threshold_argmax(p)
    mask = morphological_close(mask, se, iterations)
    return largest_connected_component(mask, connectivity)
