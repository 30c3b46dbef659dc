"""Dense per-voxel displacement fields.

A field stores, for every voxel of the fixed grid, the displacement
``v = phi(x) - x`` in voxel units, as a float64 array of shape (W, H, D, 3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import volume
from .errors import DataFormatError, InputError


@dataclass
class DisplacementField:
    """Per-voxel displacement vectors on the fixed image grid."""

    vectors: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.vectors, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise InputError(f"field must have shape (W, H, D, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InputError("displacement field contains non-finite components")
        self.vectors = arr
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.vectors.shape[:3]


def zero_field(dims, spacing=(1.0, 1.0, 1.0)) -> DisplacementField:
    return DisplacementField(np.zeros((*dims, 3)), spacing)


def write_field(field: DisplacementField, path) -> None:
    with open(path, "wb") as fh:
        volume.write_header(fh, field.dims, field.spacing, volume.DTYPE_VECTOR3)
        volume.write_payload(fh, field.vectors)


def read_field(path) -> DisplacementField:
    with open(path, "rb") as fh:
        dims, spacing, dtype_code = volume.read_header(fh, path)
        if dtype_code != volume.DTYPE_VECTOR3:
            raise DataFormatError(
                f"{path}: expected displacement field (dtype 1), got {dtype_code}"
            )
        vectors = volume.read_payload(fh, path, dims, 3)
    return DisplacementField(vectors, spacing)


def upsample_field(field: DisplacementField, target_dims) -> DisplacementField:
    """Trilinearly resample a field onto a finer grid, doubling displacements.

    Used between registration pyramid levels: voxel coordinates on the fine
    grid map to half their value on the coarse grid, and displacements
    measured in coarse voxels are worth twice as many fine voxels.
    """
    w, h, d = target_dims
    grid = np.stack(
        np.meshgrid(np.arange(w), np.arange(h), np.arange(d), indexing="ij"), axis=-1
    ).reshape(-1, 3).astype(np.float64)
    coarse_pts = grid / 2.0
    out = np.empty((w * h * d, 3))
    for c in range(3):
        comp = volume.Volume3D(np.ascontiguousarray(field.vectors[..., c]))
        out[:, c] = 2.0 * volume.sample_points(comp, coarse_pts)
    return DisplacementField(
        out.reshape(w, h, d, 3), tuple(s / 2.0 for s in field.spacing)
    )
