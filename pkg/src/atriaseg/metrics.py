"""Volumetric overlap and surface-distance measures plus report assembly.

Dice and Jaccard are voxel-count overlaps; Hausdorff and average symmetric
surface distance operate on surface voxels (foreground voxels with a 6-face
background or out-of-bounds neighbor) in physical millimeter coordinates.

Degenerate cases follow fixed conventions: two empty masks agree perfectly
(dice = jc = 1), empty vs nonempty scores 0, and surface distances are
undefined (None) when either surface is empty; reports show such entries as
"undefined" and exclude them from aggregates rather than coercing them to 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeError
from .volume_io import CaseRecord, LabelVolume, load_label_volume

Spacing = tuple[float, float, float]


def _check_pair(a: LabelVolume, b: LabelVolume) -> None:
    if a.voxels.shape != b.voxels.shape:
        raise ShapeError(f"mask shapes differ: {a.voxels.shape} vs {b.voxels.shape}")


def dice(a: LabelVolume, b: LabelVolume) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1."""
    _check_pair(a, b)
    fa = a.voxels.astype(bool)
    fb = b.voxels.astype(bool)
    na, nb = int(fa.sum()), int(fb.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(fa, fb).sum())
    return 2.0 * inter / (na + nb)


def jaccard(a: LabelVolume, b: LabelVolume) -> float:
    """|A∩B| / |A∪B|; two empty masks score 1."""
    _check_pair(a, b)
    fa = a.voxels.astype(bool)
    fb = b.voxels.astype(bool)
    union = int(np.logical_or(fa, fb).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(fa, fb).sum())
    return inter / union


def surface_voxels(m: LabelVolume, spacing: Optional[Spacing] = None) -> np.ndarray:
    """Physical (x,y,z) coordinates of foreground voxels touching background.

    A voxel is on the surface when at least one of its six face neighbors is
    background or outside the volume. Returns an (N, 3) float64 array.
    """
    spacing = spacing or m.spacing
    fg = m.voxels.astype(bool)
    padded = np.pad(fg, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1, 1:-1] & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1] & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2] & padded[1:-1, 1:-1, 2:]
    )
    surface = fg & ~interior
    z, y, x = np.nonzero(surface)
    sx, sy, sz = spacing
    return np.column_stack((x * sx, y * sy, z * sz)).astype(np.float64)


def _surfaces(a: LabelVolume, b: LabelVolume, spacing: Optional[Spacing]):
    _check_pair(a, b)
    if spacing is None:
        if a.spacing != b.spacing:
            raise ShapeError(f"mask spacings differ: {a.spacing} vs {b.spacing}")
        spacing = a.spacing
    sa = surface_voxels(a, spacing)
    sb = surface_voxels(b, spacing)
    if len(sa) == 0 or len(sb) == 0:
        return None
    return sa, sb


def hausdorff(a: LabelVolume, b: LabelVolume, spacing: Optional[Spacing] = None) -> Optional[float]:
    """Symmetric Hausdorff distance in mm; None when a surface is empty."""
    surfaces = _surfaces(a, b, spacing)
    if surfaces is None:
        return None
    sa, sb = surfaces
    d_ab = cKDTree(sb).query(sa)[0]
    d_ba = cKDTree(sa).query(sb)[0]
    return float(max(d_ab.max(), d_ba.max()))


def assd(a: LabelVolume, b: LabelVolume, spacing: Optional[Spacing] = None) -> Optional[float]:
    """Average symmetric surface distance in mm; None when a surface is empty."""
    surfaces = _surfaces(a, b, spacing)
    if surfaces is None:
        return None
    sa, sb = surfaces
    d_ab = cKDTree(sb).query(sa)[0]
    d_ba = cKDTree(sa).query(sb)[0]
    return float((d_ab.sum() + d_ba.sum()) / (len(sa) + len(sb)))


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    jc: float
    hd_mm: Optional[float]
    assd_mm: Optional[float]


@dataclass
class MetricsReport:
    cases: list[CaseMetrics] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)  # cases without predictions
    units: str = "mm"
    connectivity: int = 6

    METRICS = ("dice", "jc", "hd_mm", "assd_mm")

    def aggregates(self) -> dict[str, Optional[tuple[float, float]]]:
        """(mean, population std) per metric over cases where it is defined."""
        out: dict[str, Optional[tuple[float, float]]] = {}
        for name in self.METRICS:
            values = [getattr(c, name) for c in self.cases if getattr(c, name) is not None]
            if values:
                arr = np.asarray(values, dtype=np.float64)
                out[name] = (float(arr.mean()), float(arr.std()))
            else:
                out[name] = None
        return out

    def to_json_dict(self) -> dict:
        return {
            "units": self.units,
            "surface_connectivity": self.connectivity,
            "cases": [
                {
                    "case_id": c.case_id,
                    "dice": c.dice,
                    "jc": c.jc,
                    "hd_mm": c.hd_mm,
                    "assd_mm": c.assd_mm,
                }
                for c in self.cases
            ],
            "missing_predictions": list(self.missing),
            "aggregates": {
                name: ({"mean": agg[0], "std": agg[1]} if agg else None)
                for name, agg in self.aggregates().items()
            },
        }

    def to_text(self) -> str:
        lines = [
            f"distance units: {self.units}; surface connectivity: {self.connectivity}-face",
            f"{'case':<16}{'Dice':>10}{'JC':>10}{'HD':>10}{'ASSD':>10}",
        ]
        for c in self.cases:
            hd = f"{c.hd_mm:.2f}" if c.hd_mm is not None else "undefined"
            sd = f"{c.assd_mm:.2f}" if c.assd_mm is not None else "undefined"
            lines.append(f"{c.case_id:<16}{c.dice:>10.3f}{c.jc:>10.3f}{hd:>10}{sd:>10}")
        agg = self.aggregates()
        lines.append(
            f"{'mean (std)':<16}"
            f"{format_mean_std(agg['dice'], 3):>14}"
            f"{format_mean_std(agg['jc'], 3):>16}"
            f"{format_mean_std(agg['hd_mm'], 2):>16}"
            f"{format_mean_std(agg['assd_mm'], 2):>16}"
        )
        for case_id in self.missing:
            lines.append(f"{case_id:<16}missing prediction (excluded from aggregates)")
        return "\n".join(lines) + "\n"


def format_mean_std(agg: Optional[tuple[float, float]], decimals: int) -> str:
    if agg is None:
        return "undefined"
    return f"{agg[0]:.{decimals}f} ({agg[1]:.{decimals}f})"


def evaluate_manifest(
    pred_dir: Union[str, Path],
    records: Sequence[CaseRecord],
    connectivity: int = 6,
) -> MetricsReport:
    """Score predictions named `<case_id>.avl1` in pred_dir against manifest masks.

    Cases with no prediction file are listed under `missing` and excluded
    from aggregates.
    """
    pred_dir = Path(pred_dir)
    report = MetricsReport(connectivity=connectivity)
    for record in records:
        if record.mask_path is None:
            report.missing.append(record.case_id)
            continue
        pred_path = pred_dir / f"{record.case_id}.avl1"
        if not pred_path.exists():
            report.missing.append(record.case_id)
            continue
        gt = load_label_volume(record.mask_path)
        pred = load_label_volume(pred_path)
        report.cases.append(
            CaseMetrics(
                case_id=record.case_id,
                dice=dice(pred, gt),
                jc=jaccard(pred, gt),
                hd_mm=hausdorff(pred, gt),
                assd_mm=assd(pred, gt),
            )
        )
    return report


def comparison_text(
    reports: Sequence[MetricsReport], labels: Sequence[str]
) -> str:
    """Side-by-side aggregate table for several prediction sets."""
    lines = [f"{'method':<24}{'Dice':>16}{'JC':>16}{'HD':>16}{'ASSD':>16}"]
    for label, report in zip(labels, reports):
        agg = report.aggregates()
        lines.append(
            f"{label:<24}"
            f"{format_mean_std(agg['dice'], 3):>16}"
            f"{format_mean_std(agg['jc'], 3):>16}"
            f"{format_mean_std(agg['hd_mm'], 2):>16}"
            f"{format_mean_std(agg['assd_mm'], 2):>16}"
        )
    return "\n".join(lines) + "\n"


def save_report(report: MetricsReport, out_dir: Union[str, Path]) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    text_path = out_dir / "report.txt"
    json_path.write_text(json.dumps(report.to_json_dict(), indent=2) + "\n")
    text_path.write_text(report.to_text())
    return json_path, text_path
