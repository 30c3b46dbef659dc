"""Deformable registration by mutual-information descent with a curvature penalty.

The transform is a dense per-voxel displacement field. The cost is

    cost(v) = -MI(warp(moving, v), fixed) + alpha * bending(v)

where MI is a Parzen-window (linear tent) joint-histogram mutual information
and the bending term sums squared second-order finite differences of the
field. Optimization is plain gradient descent with backtracking line search,
Gaussian-smoothed updates, and a coarse-to-fine pyramid.

The MI gradient is analytic: it chains through the tent bin weights, the
min-max intensity normalization (including the dependence of the extreme
samples), and the trilinear interpolation of the warped image. It is
validated against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, InputError, NumericsError
from .fields import DisplacementField, upsample_field, zero_field
from .volume import (
    BoundaryPolicy,
    Volume3D,
    downsample2x,
    sample_gradient,
    sample_points,
)

_LOG_FLOOR = 1e-12


@dataclass
class RegistrationConfig:
    alpha: float = 0.1          # bending-energy weight
    bins: int = 32              # MI histogram bins
    levels: int = 3             # pyramid levels (coarsest may be clamped)
    step: float = 1.0           # initial gradient step per level
    max_iters: int = 100        # accepted iterations per level
    smooth_sigma: float = 1.0   # Gaussian smoothing of the update, voxels
    tol: float = 1e-6           # relative cost-decrease stopping threshold

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.bins < 4:
            raise ConfigError(f"bins must be >= 4, got {self.bins}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.step <= 0:
            raise ConfigError(f"step must be > 0, got {self.step}")
        if self.tol <= 0:
            raise ConfigError(f"tol must be > 0, got {self.tol}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.smooth_sigma < 0:
            raise ConfigError(f"smooth_sigma must be >= 0, got {self.smooth_sigma}")


@dataclass
class JointHistogram:
    """Normalized Parzen joint histogram with its marginals."""

    joint: np.ndarray            # (bins, bins), moving rows, fixed columns
    marginal_moving: np.ndarray  # row sums
    marginal_fixed: np.ndarray   # column sums


@dataclass
class CostLogEntry:
    level: int
    iteration: int
    cost: float
    step: float


@dataclass
class RegistrationResult:
    field: DisplacementField
    converged: bool
    cost_log: list[CostLogEntry] = dc_field(default_factory=list)

    @property
    def final_cost(self) -> float:
        return self.cost_log[-1].cost


def warp(
    moving: Volume3D,
    field: DisplacementField,
    policy: BoundaryPolicy = BoundaryPolicy(),
) -> Volume3D:
    """Resample ``moving`` through the field: out(x) = moving(x + v(x))."""
    w, h, d = field.dims
    pts = _grid_points(field.dims) + field.vectors.reshape(-1, 3)
    vals = sample_points(moving, pts, policy)
    return Volume3D(vals.reshape(w, h, d), field.spacing)


def _grid_points(dims) -> np.ndarray:
    w, h, d = dims
    return (
        np.stack(np.meshgrid(np.arange(w), np.arange(h), np.arange(d), indexing="ij"), axis=-1)
        .reshape(-1, 3)
        .astype(np.float64)
    )


def _bin_coordinates(values: np.ndarray, bins: int):
    """Min-max map intensities onto [0, bins-1]; constant input maps to 0."""
    mn = float(values.min())
    mx = float(values.max())
    if mx == mn:
        return np.zeros_like(values), 0.0, mn, mx
    scale = (bins - 1) / (mx - mn)
    return (values - mn) * scale, scale, mn, mx


def _tent(t: np.ndarray, bins: int):
    """Lower bin index and fractional weight of each sample's tent."""
    idx = np.clip(np.floor(t).astype(np.int64), 0, bins - 2)
    frac = t - idx
    return idx, frac


def joint_histogram(moving_values: np.ndarray, fixed_values: np.ndarray, bins: int) -> JointHistogram:
    """Tent-spread joint histogram of two equally sized intensity arrays.

    Each sample spreads linearly over its two nearest bins on both axes, so
    the joint receives a 2x2 patch per sample and the total mass is 1.
    """
    m = np.asarray(moving_values, dtype=np.float64).ravel()
    f = np.asarray(fixed_values, dtype=np.float64).ravel()
    if m.size != f.size:
        raise InputError(f"intensity arrays differ in size: {m.size} vs {f.size}")
    tm, _, _, _ = _bin_coordinates(m, bins)
    tf, _, _, _ = _bin_coordinates(f, bins)
    im, fm = _tent(tm, bins)
    jf, ff = _tent(tf, bins)

    joint = np.zeros((bins, bins))
    np.add.at(joint, (im, jf), (1 - fm) * (1 - ff))
    np.add.at(joint, (im, jf + 1), (1 - fm) * ff)
    np.add.at(joint, (im + 1, jf), fm * (1 - ff))
    np.add.at(joint, (im + 1, jf + 1), fm * ff)
    joint /= m.size
    return JointHistogram(joint, joint.sum(axis=1), joint.sum(axis=0))


def _mi_from_joint(hist: JointHistogram) -> float:
    p = hist.joint
    nz = p > 0
    q = np.outer(hist.marginal_moving, hist.marginal_fixed)
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def mattes_mi(warped: Volume3D, fixed: Volume3D, bins: int = 32) -> float:
    """Mutual information between two volumes of equal dims.

    Returns 0 (zero entropy) when either image is constant.
    """
    if warped.dims != fixed.dims:
        raise InputError(f"dims differ: {warped.dims} vs {fixed.dims}")
    if bins < 4:
        raise ConfigError(f"bins must be >= 4, got {bins}")
    return _mi_from_joint(joint_histogram(warped.data, fixed.data, bins))


def _mi_value_and_gradient(m: np.ndarray, f: np.ndarray, bins: int):
    """MI and its derivative with respect to each moving-intensity sample.

    Includes the coupling through the moving image's min and max, which set
    the bin mapping: the extreme samples pick up the accumulated sensitivity
    of every other sample to the normalization.
    """
    m = m.ravel()
    f = f.ravel()
    n = m.size
    tm, scale, mn, mx = _bin_coordinates(m, bins)
    if scale == 0.0:
        return 0.0, np.zeros_like(m)
    tf, _, _, _ = _bin_coordinates(f, bins)
    im, fm = _tent(tm, bins)
    jf, ff = _tent(tf, bins)

    joint = np.zeros((bins, bins))
    np.add.at(joint, (im, jf), (1 - fm) * (1 - ff))
    np.add.at(joint, (im, jf + 1), (1 - fm) * ff)
    np.add.at(joint, (im + 1, jf), fm * (1 - ff))
    np.add.at(joint, (im + 1, jf + 1), fm * ff)
    joint /= n

    q1 = joint.sum(axis=1)
    q2 = joint.sum(axis=0)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(q1, q2)[nz])))

    # dMI/dC_ab for raw counts C = n * P; the constant -1 term cancels
    # because every sample's total mass is conserved.
    with np.errstate(divide="ignore"):
        log_term = np.log(
            np.maximum(joint, _LOG_FLOOR)
            / np.maximum(np.outer(q1, q2), _LOG_FLOOR)
        )
    dmi_dc = (log_term - 1.0) / n

    # dMI/dt per sample: mass moves from row im to row im+1 as t grows.
    g_t = (dmi_dc[im + 1, jf] - dmi_dc[im, jf]) * (1 - ff) + (
        dmi_dc[im + 1, jf + 1] - dmi_dc[im, jf + 1]
    ) * ff

    grad = g_t * scale
    # normalization coupling: t_r = (v_r - mn) * (bins-1)/(mx - mn)
    s_min = int(np.argmin(m))
    s_max = int(np.argmax(m))
    inv_range = 1.0 / (mx - mn)
    grad[s_min] += float(np.sum(g_t * (tm - (bins - 1))) * inv_range)
    grad[s_max] += float(np.sum(g_t * (-tm)) * inv_range)
    return mi, grad


def bending_energy(field: DisplacementField) -> float:
    """Sum of squared second differences of every component over the interior.

    All six unique second partials enter per component; the mixed ones are
    counted twice. Unit voxel volume. Zero exactly for affine fields.
    """
    value, _ = _bending_value_and_responses(field)
    return value


_PURE_AXES = (0, 1, 2)
_MIXED_PAIRS = ((0, 1), (0, 2), (1, 2))


def _second_diff(comp: np.ndarray, axis: int) -> np.ndarray:
    """Pure second difference on the interior of one axis, full on others."""
    lo = [slice(1, -1)] * 3
    mid = [slice(1, -1)] * 3
    hi = [slice(1, -1)] * 3
    lo[axis] = slice(None, -2)
    mid[axis] = slice(1, -1)
    hi[axis] = slice(2, None)
    return comp[tuple(hi)] - 2 * comp[tuple(mid)] + comp[tuple(lo)]


def _mixed_diff(comp: np.ndarray, ax_a: int, ax_b: int) -> np.ndarray:
    sl = {}
    for sa in (-1, 1):
        for sb in (-1, 1):
            s = [slice(1, -1)] * 3
            s[ax_a] = slice(1 + sa, comp.shape[ax_a] - 1 + sa or None)
            s[ax_b] = slice(1 + sb, comp.shape[ax_b] - 1 + sb or None)
            sl[(sa, sb)] = comp[tuple(s)]
    return 0.25 * (sl[(1, 1)] - sl[(1, -1)] - sl[(-1, 1)] + sl[(-1, -1)])


def _bending_value_and_responses(field: DisplacementField):
    if any(n < 3 for n in field.dims):
        raise InputError(f"bending energy needs dims >= 3, got {field.dims}")
    total = 0.0
    responses = []
    for c in range(3):
        comp = field.vectors[..., c]
        # interior slices restricted to 1..n-2 on every axis
        pure = [_second_diff(comp, ax) for ax in _PURE_AXES]
        mixed = [_mixed_diff(comp, a, b) for a, b in _MIXED_PAIRS]
        total += sum(float(np.sum(r * r)) for r in pure)
        total += 2.0 * sum(float(np.sum(r * r)) for r in mixed)
        responses.append((pure, mixed))
    return total, responses


def bending_gradient(field: DisplacementField) -> np.ndarray:
    """d(bending_energy)/d(field), shape (W, H, D, 3)."""
    _, responses = _bending_value_and_responses(field)
    grad = np.zeros_like(field.vectors)
    w, h, d = field.dims
    inner = (slice(1, -1),) * 3

    def scatter(dst, resp, offsets, coeff):
        target = [slice(1 + o, (n - 1 + o) or None) for o, n in zip(offsets, (w, h, d))]
        dst[tuple(target)] += coeff * resp

    for c in range(3):
        pure, mixed = responses[c]
        g = grad[..., c]
        for ax, resp in zip(_PURE_AXES, pure):
            for o, a in ((-1, 1.0), (0, -2.0), (1, 1.0)):
                offs = [0, 0, 0]
                offs[ax] = o
                scatter(g, resp, offs, 2.0 * a)
        for (ax_a, ax_b), resp in zip(_MIXED_PAIRS, mixed):
            for sa in (-1, 1):
                for sb in (-1, 1):
                    offs = [0, 0, 0]
                    offs[ax_a] = sa
                    offs[ax_b] = sb
                    scatter(g, resp, offs, 2.0 * 2.0 * 0.25 * sa * sb)
    return grad


def registration_cost(
    field: DisplacementField,
    moving: Volume3D,
    fixed: Volume3D,
    config: RegistrationConfig,
) -> float:
    _check_dims(field, moving, fixed)
    warped = warp(moving, field)
    cost = -mattes_mi(warped, fixed, config.bins)
    if config.alpha != 0.0:
        cost += config.alpha * bending_energy(field)
    return cost


def registration_cost_gradient(
    field: DisplacementField,
    moving: Volume3D,
    fixed: Volume3D,
    config: RegistrationConfig,
):
    """Cost and its analytic gradient with respect to the field, (W,H,D,3)."""
    _check_dims(field, moving, fixed)
    pts = _grid_points(field.dims) + field.vectors.reshape(-1, 3)
    warped_vals = sample_points(moving, pts)
    mi, dmi_dv = _mi_value_and_gradient(warped_vals, fixed.data.ravel(), config.bins)
    interp_grad = sample_gradient(moving, pts)
    grad = (-dmi_dv[:, None] * interp_grad).reshape(field.vectors.shape)
    cost = -mi
    if config.alpha != 0.0:
        cost += config.alpha * bending_energy(field)
        grad += config.alpha * bending_gradient(field)
    return cost, grad


def _check_dims(field, moving, fixed):
    if moving.dims != fixed.dims:
        raise InputError(f"moving dims {moving.dims} != fixed dims {fixed.dims}")
    if field.dims != fixed.dims:
        raise InputError(f"field dims {field.dims} != fixed dims {fixed.dims}")


def _pyramid(vol: Volume3D, levels: int) -> list[Volume3D]:
    """Finest-first pyramid; stops coarsening before any dim drops below 6."""
    out = [vol]
    for _ in range(levels - 1):
        if any(n < 12 for n in out[-1].dims):
            break
        out.append(downsample2x(out[-1]))
    return out


def register(moving: Volume3D, fixed: Volume3D, config: RegistrationConfig | None = None) -> RegistrationResult:
    """Estimate the displacement field aligning ``moving`` onto ``fixed``.

    The cost history over accepted steps is non-increasing at each pyramid
    level. Non-convergence is reported via ``converged``, never raised; a
    NaN cost aborts with NumericsError.
    """
    config = config or RegistrationConfig()
    if moving.dims != fixed.dims:
        raise InputError(f"moving dims {moving.dims} != fixed dims {fixed.dims}")

    moving_pyr = _pyramid(moving, config.levels)
    fixed_pyr = _pyramid(fixed, config.levels)
    n_levels = len(moving_pyr)

    log: list[CostLogEntry] = []
    converged = True
    field = zero_field(moving_pyr[-1].dims, moving_pyr[-1].spacing)

    for level in range(n_levels - 1, -1, -1):
        mov, fix = moving_pyr[level], fixed_pyr[level]
        if field.dims != mov.dims:
            field = upsample_field(field, mov.dims)
        field, level_log, level_ok = _optimize_level(field, mov, fix, config, level)
        log.extend(level_log)
        converged = converged and level_ok

    return RegistrationResult(field=field, converged=converged, cost_log=log)


def _optimize_level(field, mov, fix, config, level):
    step = config.step
    vectors = field.vectors
    cost, grad = registration_cost_gradient(field, mov, fix, config)
    _check_finite_cost(cost)
    log = [CostLogEntry(level, 0, cost, step)]
    converged = False

    for it in range(1, config.max_iters + 1):
        direction = np.empty_like(grad)
        if config.smooth_sigma > 0:
            for c in range(3):
                direction[..., c] = gaussian_filter(
                    grad[..., c], config.smooth_sigma, mode="nearest"
                )
        else:
            direction[:] = grad
        # max-normalize so `step` reads as voxels of displacement per move
        peak = np.abs(direction).max()
        if peak > 0:
            direction /= peak

        accepted = False
        while step > 1e-12:
            trial = DisplacementField(vectors - step * direction, field.spacing)
            trial_cost = registration_cost(trial, mov, fix, config)
            _check_finite_cost(trial_cost)
            if trial_cost < cost:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True  # no descent direction left at this scale
            break

        decrease = cost - trial_cost
        vectors = trial.vectors
        field = trial
        cost = trial_cost
        log.append(CostLogEntry(level, it, cost, step))
        if decrease <= config.tol * abs(cost):
            converged = True
            break
        step *= 1.5
        cost, grad = registration_cost_gradient(field, mov, fix, config)
        _check_finite_cost(cost)
        cost = log[-1].cost  # identical value; guards against drift

    return field, log, converged


def _check_finite_cost(cost: float) -> None:
    if not np.isfinite(cost):
        raise NumericsError(f"registration cost became non-finite: {cost}")


def write_cost_log(log: list[CostLogEntry], path) -> None:
    """Plain-text diagnostics: one `level iter cost step` line per entry."""
    with open(path, "w") as fh:
        fh.write("level\titer\tcost\tstep\n")
        for e in log:
            fh.write(f"{e.level}\t{e.iteration}\t{e.cost:.17g}\t{e.step:.6g}\n")
