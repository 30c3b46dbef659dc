"""3D scalar volumes: representation, interpolation, preprocessing, file I/O.

Conventions used throughout the toolkit:

* A volume is indexed ``data[x, y, z]`` with shape ``(W, H, D)``; voxel
  coordinates (not mm) are the working frame. Spacing is carried for I/O
  fidelity only.
* On disk the native format stores voxels x-fastest (flat index
  ``x + W*(y + H*z)``), little-endian float32, behind a 64-byte header.
* All public operations return finite values and never mutate their inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, InputError

CLAMP = "clamp"
ZERO = "zero"


@dataclass(frozen=True)
class BoundaryPolicy:
    """How sampling treats coordinates outside the voxel grid."""

    mode: str = CLAMP

    def __post_init__(self):
        if self.mode not in (CLAMP, ZERO):
            raise InputError(f"unknown boundary mode {self.mode!r}")


@dataclass
class Volume3D:
    """A 3D scalar field with voxel spacing in mm.

    ``data`` is float64 with shape ``(W, H, D)``. Treat instances as
    immutable: operations produce new volumes, which keeps every function
    here safe to call concurrently.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise InputError(f"volume data must be 3-D, got shape {arr.shape}")
        if any(n < 1 for n in arr.shape):
            raise InputError(f"volume dims must be positive, got {arr.shape}")
        if any(s <= 0 for s in self.spacing):
            raise InputError(f"voxel spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(arr)):
            raise InputError("volume contains non-finite values")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def allclose(self, other: "Volume3D", tol: float = 0.0) -> bool:
        return self.dims == other.dims and np.allclose(
            self.data, other.data, rtol=0.0, atol=tol
        )


def sample_points(
    vol: Volume3D, points: np.ndarray, policy: BoundaryPolicy = BoundaryPolicy()
) -> np.ndarray:
    """Trilinear interpolation of ``vol`` at continuous voxel coordinates.

    ``points`` has shape (N, 3). Exact voxel-center queries return stored
    values. Under ``clamp`` the coordinates are clamped to the grid; under
    ``zero`` any corner outside the grid contributes zero.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InputError(f"points must have shape (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InputError("sample points contain non-finite coordinates")

    data = vol.data
    dims = np.array(vol.dims)

    if policy.mode == CLAMP:
        pts = np.clip(pts, 0.0, dims - 1.0)

    i0 = np.floor(pts).astype(np.int64)
    frac = pts - i0
    out = np.zeros(pts.shape[0], dtype=np.float64)
    for corner in range(8):
        offs = np.array([(corner >> a) & 1 for a in range(3)])
        idx = i0 + offs
        w = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=1)
        if policy.mode == CLAMP:
            idx = np.clip(idx, 0, dims - 1)
            out += w * data[idx[:, 0], idx[:, 1], idx[:, 2]]
        else:
            valid = np.all((idx >= 0) & (idx < dims), axis=1)
            ii = idx[valid]
            out[valid] += w[valid] * data[ii[:, 0], ii[:, 1], ii[:, 2]]
    return out


def sample_gradient(vol: Volume3D, points: np.ndarray) -> np.ndarray:
    """Spatial gradient of the trilinear interpolant at each point, (N, 3).

    Uses clamp semantics; the derivative along an axis is zero wherever the
    coordinate is clamped outside the grid.
    """
    pts = np.asarray(points, dtype=np.float64)
    data = vol.data
    dims = np.array(vol.dims)

    inside = (pts > 0.0) & (pts < dims - 1.0)
    cpts = np.clip(pts, 0.0, dims - 1.0)
    i0 = np.floor(cpts).astype(np.int64)
    # keep the cell index valid when sitting exactly on the upper face
    i0 = np.minimum(i0, dims - 2)
    i0 = np.maximum(i0, 0)
    frac = cpts - i0

    grad = np.zeros_like(pts)
    for corner in range(8):
        offs = np.array([(corner >> a) & 1 for a in range(3)])
        idx = np.clip(i0 + offs, 0, dims - 1)
        vals = data[idx[:, 0], idx[:, 1], idx[:, 2]]
        w = np.where(offs == 1, frac, 1.0 - frac)
        for axis in range(3):
            dw = np.where(offs[axis] == 1, 1.0, -1.0)
            others = [a for a in range(3) if a != axis]
            grad[:, axis] += vals * dw * w[:, others[0]] * w[:, others[1]]
    return grad * inside


def trilinear_sample(
    vol: Volume3D,
    point: tuple[float, float, float],
    policy: BoundaryPolicy = BoundaryPolicy(),
) -> float:
    """Interpolate a single continuous (x, y, z) voxel coordinate."""
    return float(sample_points(vol, np.asarray(point, dtype=np.float64)[None, :], policy)[0])


def nearest_rank_percentile(values: np.ndarray, p: float) -> float:
    """Nearest-rank percentile of the flattened values (deterministic)."""
    if not 0.0 <= p <= 100.0:
        raise InputError(f"percentile must be in [0, 100], got {p}")
    flat = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = flat.size
    rank = int(np.ceil(p / 100.0 * n))
    return float(flat[max(rank, 1) - 1])


def contrast_stretch(vol: Volume3D, p_lo: float = 0.0, p_hi: float = 100.0) -> Volume3D:
    """Linearly map the [p_lo, p_hi] percentile range onto [0, 1], clipping.

    Constant volumes (or coincident percentiles) map to all-zeros.
    """
    if not (0.0 <= p_lo < p_hi <= 100.0):
        raise InputError(f"need 0 <= p_lo < p_hi <= 100, got ({p_lo}, {p_hi})")
    lo = nearest_rank_percentile(vol.data, p_lo)
    hi = nearest_rank_percentile(vol.data, p_hi)
    if hi == lo:
        return Volume3D(np.zeros(vol.dims), vol.spacing)
    out = np.clip((vol.data - lo) / (hi - lo), 0.0, 1.0)
    return Volume3D(out, vol.spacing)


def downsample2x(vol: Volume3D) -> Volume3D:
    """Halve each dimension by averaging 2x2x2 blocks; spacing doubles.

    Odd trailing voxels are averaged over the partial block, so the global
    mean is preserved exactly when all dims are even.
    """
    if any(n < 2 for n in vol.dims):
        raise InputError(f"downsample2x needs dims >= 2, got {vol.dims}")
    data = vol.data
    counts = np.ones_like(data)
    for axis in range(3):
        edges = np.arange(0, data.shape[axis], 2)
        data = np.add.reduceat(data, edges, axis=axis)
        counts = np.add.reduceat(counts, edges, axis=axis)
    return Volume3D(data / counts, tuple(2.0 * s for s in vol.spacing))


# ---------------------------------------------------------------------------
# Native file format ("JSMV")
#
# 64-byte header, little-endian:
#   0   magic   4s   b"JSMV"
#   4   version u32  currently 1
#   8   W,H,D   3*u32
#   20  spacing 3*f32
#   32  dtype   u8   0 = float32 scalar, 1 = float32 x/y/z interleaved
#   33  reserved (zeros)
# followed by raw little-endian float32 voxels, x-fastest. Values are cast
# from the in-memory float64, so round-trips are bit-exact exactly when the
# values are float32-representable.
# ---------------------------------------------------------------------------

MAGIC = b"JSMV"
FORMAT_VERSION = 1
HEADER_STRUCT = struct.Struct("<4sI3I3fB31x")
DTYPE_SCALAR = 0
DTYPE_VECTOR3 = 1


def write_header(fh, dims, spacing, dtype_code: int) -> None:
    fh.write(
        HEADER_STRUCT.pack(
            MAGIC, FORMAT_VERSION, dims[0], dims[1], dims[2],
            spacing[0], spacing[1], spacing[2], dtype_code,
        )
    )


def read_header(fh, path) -> tuple[tuple[int, int, int], tuple[float, float, float], int]:
    raw = fh.read(HEADER_STRUCT.size)
    if len(raw) < HEADER_STRUCT.size:
        raise DataFormatError(
            f"{path}: truncated header, got {len(raw)} of {HEADER_STRUCT.size} bytes"
        )
    magic, version, w, h, d, sx, sy, sz, dtype_code = HEADER_STRUCT.unpack(raw)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version} at offset 4")
    if min(w, h, d) < 1:
        raise DataFormatError(f"{path}: non-positive dims {(w, h, d)} at offset 8")
    if min(sx, sy, sz) <= 0:
        raise DataFormatError(f"{path}: non-positive spacing at offset 20")
    if dtype_code not in (DTYPE_SCALAR, DTYPE_VECTOR3):
        raise DataFormatError(f"{path}: unsupported dtype code {dtype_code} at offset 32")
    return (w, h, d), (sx, sy, sz), dtype_code


def read_payload(fh, path, dims, channels: int) -> np.ndarray:
    """Read the voxel payload as float64 with shape (W, H, D, channels)."""
    w, h, d = dims
    expected = w * h * d * channels * 4
    raw = fh.read(expected)
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: truncated payload, expected {expected} bytes at offset "
            f"{HEADER_STRUCT.size}, got {len(raw)}"
        )
    if fh.read(1):
        raise DataFormatError(
            f"{path}: trailing bytes after offset {HEADER_STRUCT.size + expected}"
        )
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    # x-fastest on disk; channel is the innermost unit for vector payloads
    return flat.reshape((d, h, w, channels) if channels > 1 else (d, h, w)).transpose(
        (2, 1, 0, 3) if channels > 1 else (2, 1, 0)
    )


def write_payload(fh, arr: np.ndarray) -> None:
    """Write (W, H, D[, C]) float data as x-fastest little-endian float32."""
    if arr.ndim == 3:
        disk = arr.transpose(2, 1, 0)
    else:
        disk = arr.transpose(2, 1, 0, 3)
    fh.write(np.ascontiguousarray(disk, dtype="<f4").tobytes())


def write_volume(vol: Volume3D, path) -> None:
    with open(path, "wb") as fh:
        write_header(fh, vol.dims, vol.spacing, DTYPE_SCALAR)
        write_payload(fh, vol.data)


def read_volume(path) -> Volume3D:
    with open(path, "rb") as fh:
        dims, spacing, dtype_code = read_header(fh, path)
        if dtype_code != DTYPE_SCALAR:
            raise DataFormatError(
                f"{path}: expected scalar volume (dtype 0), got {dtype_code}"
            )
        data = read_payload(fh, path, dims, 1)
    return Volume3D(data, spacing)


# ---------------------------------------------------------------------------
# NIfTI-1 (read-only convenience; uncompressed single-file, float32/int16)
# ---------------------------------------------------------------------------

_NIFTI_FLOAT32 = 16
_NIFTI_INT16 = 4


def read_nifti(path) -> Volume3D:
    with open(path, "rb") as fh:
        hdr = fh.read(352)
        if len(hdr) < 352:
            raise DataFormatError(f"{path}: truncated NIfTI-1 header ({len(hdr)} bytes)")
        sizeof_hdr = struct.unpack_from("<i", hdr, 0)[0]
        endian = "<"
        if sizeof_hdr != 348:
            sizeof_hdr = struct.unpack_from(">i", hdr, 0)[0]
            endian = ">"
            if sizeof_hdr != 348:
                raise DataFormatError(f"{path}: not a NIfTI-1 file (sizeof_hdr at offset 0)")
        magic = hdr[344:348]
        if magic not in (b"n+1\x00",):
            raise DataFormatError(f"{path}: unsupported NIfTI magic {magic!r} at offset 344")
        dim = struct.unpack_from(endian + "8h", hdr, 40)
        if dim[0] < 3 or any(n < 1 for n in dim[1:4]) or any(n > 1 for n in dim[4 : dim[0] + 1]):
            raise DataFormatError(f"{path}: expected a single 3-D image, dim={dim}")
        datatype = struct.unpack_from(endian + "h", hdr, 70)[0]
        if datatype not in (_NIFTI_FLOAT32, _NIFTI_INT16):
            raise DataFormatError(
                f"{path}: unsupported NIfTI datatype {datatype} at offset 70 "
                "(float32 and int16 only)"
            )
        pixdim = struct.unpack_from(endian + "8f", hdr, 76)
        vox_offset = int(struct.unpack_from(endian + "f", hdr, 108)[0])
        w, h, d = dim[1], dim[2], dim[3]
        itemsize = 4 if datatype == _NIFTI_FLOAT32 else 2
        expected = w * h * d * itemsize
        fh.seek(vox_offset)
        raw = fh.read(expected)
        if len(raw) != expected:
            raise DataFormatError(
                f"{path}: payload size mismatch, expected {expected} bytes at "
                f"offset {vox_offset}, got {len(raw)}"
            )
        np_dtype = endian + ("f4" if datatype == _NIFTI_FLOAT32 else "i2")
        data = np.frombuffer(raw, dtype=np_dtype).astype(np.float64)
        spacing = tuple(abs(s) if s != 0 else 1.0 for s in pixdim[1:4])
    return Volume3D(data.reshape((d, h, w)).transpose(2, 1, 0), spacing)
