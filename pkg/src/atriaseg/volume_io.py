"""3D volume data model and native AVL1 file I/O.

Volumes are stored axial-slice-major: the voxel at grid position (x, y, z)
lives at linear index ``z*(nx*ny) + y*nx + x``, i.e. numpy shape (nz, ny, nx)
in C order. Intensity volumes carry float32 voxels, binary masks uint8 {0, 1}.

AVL1 file layout (little-endian throughout):

    magic   4 bytes  b"AVL1"
    dtype   u8       0 = float32 intensity, 1 = uint8 mask
    nx      u32
    ny      u32
    nz      u32
    sx      f32      voxel spacing in mm
    sy      f32
    sz      f32
    payload nx*ny*nz scalars, x fastest, then y, then z

Case manifests are JSON arrays of objects
``{"id", "volume", "mask"?, "ablation"? in {"pre","post"}}``; paths are
resolved relative to the manifest file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import FormatError, IntegrityError

MAGIC = b"AVL1"
_HEADER = struct.Struct("<4sBIIIfff")

DTYPE_F32 = 0
DTYPE_U8 = 1

PRE = "pre"
POST = "post"


@dataclass(frozen=True)
class Volume3D:
    """3D intensity raster with voxel spacing in millimeters."""

    voxels: np.ndarray  # (nz, ny, nx) float32
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.ascontiguousarray(self.voxels, dtype=np.float32)
        object.__setattr__(self, "voxels", v)
        if v.ndim != 3:
            raise IntegrityError(f"volume must be 3D, got shape {v.shape}")
        if min(v.shape) < 1:
            raise IntegrityError(f"volume dims must be positive, got {self.dims}")
        if not np.all(np.isfinite(v)):
            raise IntegrityError("volume contains non-finite voxels")
        s = tuple(float(x) for x in self.spacing)
        object.__setattr__(self, "spacing", s)
        if len(s) != 3 or any(not np.isfinite(x) or x <= 0 for x in s):
            raise IntegrityError(f"spacing must be three positive finite values, got {s}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz)"""
        nz, ny, nx = self.voxels.shape
        return (nx, ny, nz)


@dataclass(frozen=True)
class LabelVolume:
    """Binary segmentation mask with the same layout/spacing rules as Volume3D."""

    voxels: np.ndarray  # (nz, ny, nx) uint8, values in {0, 1}
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.ascontiguousarray(self.voxels, dtype=np.uint8)
        object.__setattr__(self, "voxels", v)
        if v.ndim != 3:
            raise IntegrityError(f"mask must be 3D, got shape {v.shape}")
        if min(v.shape) < 1:
            raise IntegrityError(f"mask dims must be positive, got {self.dims}")
        bad = np.setdiff1d(np.unique(v), [0, 1])
        if bad.size:
            raise IntegrityError(f"mask voxels must be 0 or 1, found {bad.tolist()}")
        s = tuple(float(x) for x in self.spacing)
        object.__setattr__(self, "spacing", s)
        if len(s) != 3 or any(not np.isfinite(x) or x <= 0 for x in s):
            raise IntegrityError(f"spacing must be three positive finite values, got {s}")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.voxels.shape
        return (nx, ny, nz)


AnyVolume = Union[Volume3D, LabelVolume]


@dataclass(frozen=True)
class CaseRecord:
    """One subject: an intensity volume, optional mask, optional ablation status."""

    case_id: str
    volume_path: Path
    mask_path: Optional[Path] = None
    ablation: Optional[str] = None  # PRE | POST

    def __post_init__(self):
        if self.ablation is not None and self.ablation not in (PRE, POST):
            raise IntegrityError(
                f"case {self.case_id!r}: unknown ablation token {self.ablation!r}"
            )


def save_volume(vol: AnyVolume, path: Union[str, Path]) -> None:
    """Write a Volume3D or LabelVolume as an AVL1 file."""
    dtype_code = DTYPE_U8 if isinstance(vol, LabelVolume) else DTYPE_F32
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    header = _HEADER.pack(MAGIC, dtype_code, nx, ny, nz, sx, sy, sz)
    payload = np.ascontiguousarray(vol.voxels).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_volume(path: Union[str, Path]) -> AnyVolume:
    """Read an AVL1 file; returns Volume3D or LabelVolume depending on dtype code.

    Raises FormatError for malformed headers (naming the offending field) and
    IntegrityError when the payload disagrees with the header.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise FormatError(f"cannot read volume {path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the AVL1 header")
    magic, dtype_code, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} (field 'magic')")
    if dtype_code not in (DTYPE_F32, DTYPE_U8):
        raise FormatError(f"{path}: unknown dtype code {dtype_code} (field 'dtype')")
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: non-positive dims {(nx, ny, nz)} (field 'dims')")
    for name, s in (("sx", sx), ("sy", sy), ("sz", sz)):
        if not np.isfinite(s) or s <= 0:
            raise FormatError(f"{path}: invalid spacing {s} (field {name!r})")

    count = nx * ny * nz
    itemsize = 4 if dtype_code == DTYPE_F32 else 1
    payload = raw[_HEADER.size:]
    if len(payload) != count * itemsize:
        raise IntegrityError(
            f"{path}: header declares {count} voxels "
            f"({count * itemsize} bytes) but payload has {len(payload)} bytes"
        )
    if dtype_code == DTYPE_F32:
        voxels = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx)
        return Volume3D(voxels=voxels, spacing=(sx, sy, sz))
    voxels = np.frombuffer(payload, dtype=np.uint8).reshape(nz, ny, nx)
    return LabelVolume(voxels=voxels, spacing=(sx, sy, sz))


def load_label_volume(path: Union[str, Path]) -> LabelVolume:
    vol = load_volume(path)
    if not isinstance(vol, LabelVolume):
        raise IntegrityError(f"{path}: expected a mask (dtype code 1), got intensity")
    return vol


def load_manifest(path: Union[str, Path]) -> list[CaseRecord]:
    """Parse a JSON case manifest, resolving paths relative to the manifest."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except OSError as e:
        raise FormatError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(entries, list):
        raise FormatError(f"{path}: manifest must be a JSON array")

    base = path.parent
    records: list[CaseRecord] = []
    seen: set[str] = set()
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "id" not in entry or "volume" not in entry:
            raise FormatError(f"{path}: entry {i} must be an object with 'id' and 'volume'")
        case_id = str(entry["id"])
        if case_id in seen:
            raise IntegrityError(f"{path}: duplicate case id {case_id!r}")
        seen.add(case_id)
        mask = entry.get("mask")
        records.append(
            CaseRecord(
                case_id=case_id,
                volume_path=base / entry["volume"],
                mask_path=(base / mask) if mask else None,
                ablation=entry.get("ablation"),
            )
        )
    return records


def save_manifest(records: list[CaseRecord], path: Union[str, Path]) -> None:
    """Write records as a JSON manifest with paths relative to the manifest dir."""
    path = Path(path)
    base = path.parent

    def rel(p: Path) -> str:
        try:
            return str(Path(p).relative_to(base))
        except ValueError:
            return str(p)

    entries = []
    for r in records:
        entry: dict = {"id": r.case_id, "volume": rel(r.volume_path)}
        if r.mask_path is not None:
            entry["mask"] = rel(r.mask_path)
        if r.ablation is not None:
            entry["ablation"] = r.ablation
        entries.append(entry)
    path.write_text(json.dumps(entries, indent=2) + "\n")
