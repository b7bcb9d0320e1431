from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from volnet.data.nifti import read_nifti_array, write_nifti
from volnet.data.raw import read_raw, write_raw
from volnet.errors import ConstantVolumeError, DataError

MODALITIES = ("smri", "pet", "synthetic")


@dataclass
class VolumeSample:
    volume: np.ndarray
    label: int | None = None
    subject_id: str = ""
    path: str | None = None
    modality: str = "smri"
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.volume.ndim != 3:
            raise DataError(f"volume must be 3-D, got shape {self.volume.shape}")
        if not np.isfinite(self.volume).all():
            raise DataError(f"volume {self.path or self.subject_id!r} contains non-finite values")
        if self.label not in (None, 0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}")


def read_nifti(path, modality: str = "smri") -> VolumeSample:
    """Label-less sample from a ``.nii`` file."""
    return VolumeSample(read_nifti_array(path), None, Path(path).stem, str(path), modality)


def read_volume(path) -> np.ndarray:
    """Load ``.nii`` or raw-container (``.vol``) voxels by extension."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"volume file not found: {p}")
    name = p.name.lower()
    if name.endswith(".nii.gz"):
        raise DataError(f"{p}: compressed NIfTI is not supported; decompress to .nii first")
    if name.endswith(".nii"):
        return read_nifti_array(p)
    if name.endswith(".vol"):
        return read_raw(p)
    raise DataError(f"{p}: unknown volume extension (expected .nii or .vol)")


def write_volume(volume: np.ndarray, path) -> None:
    if str(path).lower().endswith(".nii"):
        write_nifti(volume, path)
    else:
        write_raw(volume, path)


def normalize_volume(volume: np.ndarray) -> np.ndarray:
    """Per-volume z-score: subtract the mean, divide by the population std."""
    v = np.asarray(volume, dtype=np.float64)
    if v.size < 2 or v.min() == v.max():
        raise ConstantVolumeError("cannot normalise a constant volume")
    out = (v - v.mean()) / v.std()
    return out.astype(volume.dtype if np.issubdtype(volume.dtype, np.floating) else np.float32)
