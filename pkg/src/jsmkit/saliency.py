"""Jacobian saliency maps: local volume change derived from a displacement field.

The per-voxel saliency value is the determinant of the spatial transform's
Jacobian, det(I + dv/dx), so the identity transform scores exactly 1
everywhere: >1 means local expansion, <1 local compression. Derivatives use
central differences on interior voxels and first-order one-sided differences
on faces, which is exact for affine fields.

A weight mask derived from the map gates the training penalty: voxels whose
determinant deviates from 1 beyond a flat-tolerance band get the (larger)
feature weight, everything else the (smaller, still positive) debug weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InputError
from .fields import DisplacementField

DEFAULT_FEATURE_WEIGHT = 0.8
DEFAULT_DEBUG_WEIGHT = 0.2
DEFAULT_FLAT_TOL = 0.02


class VolumeChange(Enum):
    COMPRESSION = -1
    NONE = 0
    EXPANSION = 1


@dataclass
class JacobianSaliencyMap:
    """Per-voxel transform-Jacobian determinants (dimensionless ratios)."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 3:
            raise InputError(f"saliency map must be 3-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InputError("saliency map contains non-finite values")
        self.values = arr
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return self.values.shape


@dataclass
class WeightMask:
    """Per-voxel penalty weights taking exactly two values."""

    weights: np.ndarray
    feature_weight: float = DEFAULT_FEATURE_WEIGHT
    debug_weight: float = DEFAULT_DEBUG_WEIGHT
    flat_tol: float = DEFAULT_FLAT_TOL


def _axis_derivative(comp: np.ndarray, axis: int) -> np.ndarray:
    """d(comp)/d(axis): central inside, one-sided on the two faces."""
    if comp.shape[axis] < 3:
        raise InputError(f"need at least 3 voxels along axis {axis} for derivatives")
    out = np.empty_like(comp)
    mid = [slice(None)] * 3
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    mid[axis] = slice(1, -1)
    lo[axis] = slice(2, None)
    hi[axis] = slice(None, -2)
    out[tuple(mid)] = 0.5 * (comp[tuple(lo)] - comp[tuple(hi)])

    first, second = [slice(None)] * 3, [slice(None)] * 3
    first[axis], second[axis] = 0, 1
    out[tuple(first)] = comp[tuple(second)] - comp[tuple(first)]
    first[axis], second[axis] = -1, -2
    out[tuple(first)] = comp[tuple(first)] - comp[tuple(second)]
    return out


def field_jacobians(field: DisplacementField) -> np.ndarray:
    """All displacement Jacobians dv_i/dx_j as an array of shape (W,H,D,3,3)."""
    jac = np.empty((*field.dims, 3, 3))
    for i in range(3):
        comp = field.vectors[..., i]
        for j in range(3):
            jac[..., i, j] = _axis_derivative(comp, j)
    return jac


def jacobian_at_voxel(field: DisplacementField, voxel) -> np.ndarray:
    """The 3x3 matrix dv_i/dx_j at one voxel."""
    x, y, z = voxel
    dims = field.dims
    if not (0 <= x < dims[0] and 0 <= y < dims[1] and 0 <= z < dims[2]):
        raise InputError(f"voxel {voxel} outside field dims {dims}")
    return field_jacobians(field)[x, y, z]


def _det3(m: np.ndarray) -> np.ndarray:
    """Cofactor expansion along the first row of (..., 3, 3) matrices."""
    return (
        m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
        - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
        + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
    )


def compute_jsm(field: DisplacementField) -> JacobianSaliencyMap:
    """Determinant of the transform Jacobian I + dv/dx at every voxel."""
    if any(n < 3 for n in field.dims):
        raise InputError(f"need dims >= 3 per axis, got {field.dims}")
    jac = field_jacobians(field)
    jac[..., 0, 0] += 1.0
    jac[..., 1, 1] += 1.0
    jac[..., 2, 2] += 1.0
    return JacobianSaliencyMap(_det3(jac), field.spacing)


def classify_voxels(jsm: JacobianSaliencyMap, flat_tol: float = DEFAULT_FLAT_TOL) -> np.ndarray:
    """Classify each voxel as expansion (+1), no change (0), or compression (-1).

    Determinants within ``1 +/- flat_tol`` (boundary included) count as no
    change.
    """
    if flat_tol < 0:
        raise InputError(f"flat tolerance must be >= 0, got {flat_tol}")
    out = np.zeros(jsm.dims, dtype=np.int8)
    out[jsm.values > 1.0 + flat_tol] = VolumeChange.EXPANSION.value
    out[jsm.values < 1.0 - flat_tol] = VolumeChange.COMPRESSION.value
    return out


def class_counts(classes: np.ndarray) -> dict[str, int]:
    return {
        "expansion": int(np.sum(classes == VolumeChange.EXPANSION.value)),
        "none": int(np.sum(classes == VolumeChange.NONE.value)),
        "compression": int(np.sum(classes == VolumeChange.COMPRESSION.value)),
    }


def weight_mask(
    jsm: JacobianSaliencyMap,
    feature_weight: float = DEFAULT_FEATURE_WEIGHT,
    debug_weight: float = DEFAULT_DEBUG_WEIGHT,
    flat_tol: float = DEFAULT_FLAT_TOL,
) -> WeightMask:
    """Feature weight wherever volume changed, debug weight elsewhere.

    No voxel ever gets weight zero: flat regions are down-weighted but kept
    as reference.
    """
    if not feature_weight > debug_weight > 0:
        raise InputError(
            f"need feature_weight > debug_weight > 0, got ({feature_weight}, {debug_weight})"
        )
    changed = classify_voxels(jsm, flat_tol) != VolumeChange.NONE.value
    weights = np.where(changed, feature_weight, debug_weight)
    return WeightMask(weights, feature_weight, debug_weight, flat_tol)
