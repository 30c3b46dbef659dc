"""Synthetic multimodal subjects with known deformations and a plantable confounder.

Each subject is the template warped by a class-scaled contraction of a fixed
region (the "atrophy") plus a smooth per-subject random deformation, with
noise. The generating displacement field is retained, so the true saliency
map is known without running registration. A second, CT-like modality is a
monotone intensity remap of the first plus independent noise, contrast
stretched.

The confounder is a small corner block whose intensity encodes the class
(correlated) or a random class (decorrelated). It sits where the true field
is flat, so the saliency weight mask assigns it the debug weight: a model
relying on it is exactly the failure mode the training penalty targets.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .errors import ConfigError, InputError
from .fields import DisplacementField
from .registration import warp
from .saliency import JacobianSaliencyMap, compute_jsm
from .volume import Volume3D, contrast_stretch, sample_points

CLASS_NAMES = ("CN", "MCI", "MLD", "SEV")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (16, 16, 16)
    template_blobs: int = 6
    blob_sigma: tuple[float, float] = (1.8, 3.2)
    texture_weight: float = 0.35
    noise_sigma: float = 0.02
    # per-class contraction at the atrophy center (det there is (1-a)^3),
    # monotone from CN upward; must stay < 1 to avoid folding
    amplitudes: tuple[float, float, float, float] = (0.0, 0.15, 0.3, 0.45)
    atrophy_center: tuple[float, float, float] | None = None
    atrophy_radius: float | None = None
    individual_sigma: float = 0.25
    marker_size: int = 2
    marker_levels: tuple[float, float, float, float] = (0.58, 0.72, 0.86, 1.0)
    confound_train: bool = True
    seed: int = 0

    def __post_init__(self):
        amps = self.amplitudes
        if not (amps[0] == 0.0 and all(a <= b for a, b in zip(amps, amps[1:]))):
            raise ConfigError(f"amplitudes must be monotone starting at 0, got {amps}")
        if amps[-1] >= 1.0:
            raise ConfigError(f"contraction must stay below 1, got {amps[-1]}")
        center, radius = self.resolved_atrophy()
        for c, n in zip(center, self.dims):
            if not radius <= c <= n - 1 - radius:
                raise ConfigError(
                    f"atrophy region (center {center}, radius {radius}) exceeds dims {self.dims}"
                )

    def resolved_atrophy(self) -> tuple[tuple[float, float, float], float]:
        center = self.atrophy_center or tuple((n - 1) * 0.62 for n in self.dims)
        radius = self.atrophy_radius or min(self.dims) * 0.22
        return center, radius


@dataclass
class Subject:
    subject_id: str
    label: int
    mod1: Volume3D
    mod2: Volume3D
    field1: DisplacementField
    field2: DisplacementField
    jsm1: JacobianSaliencyMap
    jsm2: JacobianSaliencyMap
    atrophy_mask: np.ndarray
    marker_class: int | None = None


@dataclass
class SynthRecord:
    """Provenance of one ADASYN synthetic: s = base + u * (neighbor - base)."""

    synthetic_id: str
    label: int
    base_id: str
    neighbor_id: str
    u: float


@dataclass
class Dataset:
    subjects: list[Subject]
    split: dict[str, str]  # subject id -> "train" | "test"
    spec: PhantomSpec
    synth_records: list[SynthRecord] = dc_field(default_factory=list)

    def train_subjects(self) -> list[Subject]:
        return [s for s in self.subjects if self.split[s.subject_id] == "train"]

    def test_subjects(self) -> list[Subject]:
        return [s for s in self.subjects if self.split[s.subject_id] == "test"]


def _grid(dims) -> np.ndarray:
    w, h, d = dims
    return np.stack(
        np.meshgrid(np.arange(w), np.arange(h), np.arange(d), indexing="ij"), axis=-1
    ).astype(np.float64)


def make_template(spec: PhantomSpec) -> Volume3D:
    """Deterministic smooth volume in [0, 1]: blobs over background texture.

    The low-amplitude texture keeps intensity structure everywhere, which is
    what makes dense registration against this template well-posed.
    """
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(spec.seed)
    dims = np.array(spec.dims)
    grid = _grid(spec.dims)
    vol = np.zeros(spec.dims)
    lo, hi = spec.blob_sigma
    for _ in range(spec.template_blobs):
        center = rng.uniform(0.15, 0.85, size=3) * (dims - 1)
        sigma = rng.uniform(lo, hi)
        amp = rng.uniform(0.55, 1.0)
        r2 = np.sum((grid - center) ** 2, axis=-1)
        vol += amp * np.exp(-r2 / (2 * sigma**2))
    peak = vol.max()
    if peak > 0:
        vol /= peak
    if spec.texture_weight > 0:
        tex = gaussian_filter(rng.normal(size=spec.dims), 1.5)
        tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-12)
        vol = (1.0 - spec.texture_weight) * vol + spec.texture_weight * tex
    return Volume3D(np.clip(vol, 0.0, 1.0))


def _atrophy_field(spec: PhantomSpec, amplitude: float) -> np.ndarray:
    """Inward radial contraction of the atrophy region: det < 1 inside.

    v = -a * exp(-r^2 / (2 sigma^2)) * (x - c), so the Jacobian at the center
    is -a*I and the local determinant there is (1 - a)^3.
    """
    center, radius = spec.resolved_atrophy()
    grid = _grid(spec.dims)
    offsets = grid - np.array(center)
    r2 = np.sum(offsets**2, axis=-1, keepdims=True)
    sigma = radius / 1.4
    return -amplitude * np.exp(-r2 / (2 * sigma**2)) * offsets


def _marker_slices(spec: PhantomSpec):
    s = spec.marker_size
    return (slice(1, 1 + s), slice(1, 1 + s), slice(1, 1 + s))


def _corner_taper(spec: PhantomSpec) -> np.ndarray:
    """Smooth window that vanishes around the marker corner.

    Keeps the subject-specific random deformation exactly flat there, so the
    marker always falls in the debug-weighted band of the saliency mask.
    """
    grid = _grid(spec.dims)
    guard = spec.marker_size + 3.0
    dist = np.linalg.norm(grid - np.array([1.0, 1.0, 1.0]), axis=-1)
    ramp = np.clip((dist - guard) / 3.0, 0.0, 1.0)
    return (ramp**2 * (3 - 2 * ramp))[..., None]


def _individual_field(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth random deformation: a coarse random grid upsampled trilinearly."""
    coarse = rng.normal(0.0, spec.individual_sigma, size=(4, 4, 4, 3))
    w, h, d = spec.dims
    pts = _grid(spec.dims).reshape(-1, 3) * (3.0 / (np.array(spec.dims) - 1.0))
    out = np.empty((w * h * d, 3))
    for c in range(3):
        out[:, c] = sample_points(Volume3D(coarse[..., c]), pts)
    return out.reshape(w, h, d, 3) * _corner_taper(spec)


def make_subject(
    template: Volume3D, label: int, spec: PhantomSpec, subject_seed: int, subject_id: str | None = None
) -> Subject:
    """Generate one subject; the analytic generating field is retained."""
    if not 0 <= label < len(CLASS_NAMES):
        raise InputError(f"label must be in [0, 4), got {label}")
    rng = np.random.default_rng(subject_seed)
    vecs = _atrophy_field(spec, spec.amplitudes[label]) + _individual_field(spec, rng)
    field = DisplacementField(vecs)

    warped = warp(template, field)
    mod1 = Volume3D(np.clip(warped.data + rng.normal(0.0, spec.noise_sigma, spec.dims), 0.0, 1.0))
    remapped = mod1.data**2 + rng.normal(0.0, spec.noise_sigma, spec.dims)
    mod2 = contrast_stretch(Volume3D(np.clip(remapped, -1.0, 2.0)), 1.0, 99.0)

    jsm = compute_jsm(field)
    center, radius = spec.resolved_atrophy()
    mask = np.sum((_grid(spec.dims) - np.array(center)) ** 2, axis=-1) <= radius**2
    sid = subject_id or f"s{subject_seed:08x}"
    return Subject(
        subject_id=sid, label=label, mod1=mod1, mod2=mod2,
        field1=field, field2=DisplacementField(vecs.copy()),
        jsm1=jsm, jsm2=JacobianSaliencyMap(jsm.values.copy()),
        atrophy_mask=mask,
    )


def inject_confounder(
    subject: Subject, correlated: bool, spec: PhantomSpec, rng: np.random.Generator
) -> Subject:
    """Stamp the class-indexed (or random-class) corner marker into both modalities."""
    sl = _marker_slices(spec)
    if subject.atrophy_mask[sl].any():
        raise ConfigError("confounder marker overlaps the atrophy region")
    marker_class = subject.label if correlated else int(rng.integers(0, len(CLASS_NAMES)))
    level = spec.marker_levels[marker_class]
    mod1 = subject.mod1.data.copy()
    mod2 = subject.mod2.data.copy()
    mod1[sl] = level
    mod2[sl] = level
    return replace(
        subject, mod1=Volume3D(mod1, subject.mod1.spacing),
        mod2=Volume3D(mod2, subject.mod2.spacing), marker_class=marker_class,
    )


def split_by_subject(subjects: list[Subject], test_fraction: float, seed: int) -> dict[str, str]:
    """Deterministic stratified split; every id lands in exactly one side."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    split: dict[str, str] = {}
    for label in sorted({s.label for s in subjects}):
        ids = [s.subject_id for s in subjects if s.label == label]
        if len(ids) < 2:
            raise ConfigError(f"class {label} has {len(ids)} subject(s); need >= 2 to split")
        order = rng.permutation(len(ids))
        n_test = int(round(test_fraction * len(ids)))
        n_test = min(max(n_test, 1), len(ids) - 1)
        test_ids = {ids[i] for i in order[:n_test]}
        for sid in ids:
            split[sid] = "test" if sid in test_ids else "train"
    return split


def generate_dataset(
    spec: PhantomSpec,
    subjects_per_class: int | tuple[int, int, int, int] = 40,
    test_fraction: float = 0.25,
    seed: int = 0,
    confounder: bool = True,
) -> Dataset:
    """Subjects, stratified split, and (optionally) the planted confounder.

    With ``spec.confound_train`` the marker is class-correlated on the train
    side and decorrelated (random class) on the test side.
    """
    counts = (
        (subjects_per_class,) * 4
        if isinstance(subjects_per_class, int)
        else tuple(subjects_per_class)
    )
    template = make_template(spec)
    seeds = np.random.SeedSequence(seed).spawn(sum(counts))
    subjects = []
    k = 0
    for label, count in enumerate(counts):
        for j in range(count):
            sid = f"{CLASS_NAMES[label].lower()}{j:03d}"
            sub_seed = int(seeds[k].generate_state(1)[0])
            subjects.append(make_subject(template, label, spec, sub_seed, sid))
            k += 1
    split = split_by_subject(subjects, test_fraction, seed)
    if confounder and spec.marker_size > 0:
        marker_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0FF)))
        subjects = [
            inject_confounder(
                s, correlated=spec.confound_train and split[s.subject_id] == "train",
                spec=spec, rng=marker_rng,
            )
            for s in subjects
        ]
    return Dataset(subjects, split, spec)


# ---------------------------------------------------------------------------
# ADASYN oversampling on flattened first-modality intensities
# ---------------------------------------------------------------------------


def adasyn_oversample(
    subjects: list[Subject],
    k: int = 5,
    beta: float = 1.0,
    seed: int = 0,
) -> tuple[list[Subject], list[SynthRecord]]:
    """Grow each minority class toward the majority count.

    For each minority sample, the share of the class's synthetic budget is
    proportional to the fraction of its k nearest neighbors (over the whole
    set) that belong to the majority class; each synthetic interpolates the
    sample toward a random same-class neighbor at a uniform position u, and
    images, fields, and saliency maps are interpolated identically. The
    generation receipt for every synthetic is returned for verification.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    labels = np.array([s.label for s in subjects])
    counts = {int(c): int(n) for c, n in zip(*np.unique(labels, return_counts=True))}
    majority = max(counts, key=lambda c: (counts[c], -c))
    target = counts[majority]
    if all(n == target for n in counts.values()):
        return list(subjects), []

    flat = np.stack([s.mod1.data.ravel() for s in subjects])
    d2 = _pairwise_sq_dists(flat)
    rng = np.random.default_rng(seed)
    out = list(subjects)
    records: list[SynthRecord] = []

    for label in sorted(counts):
        deficit = target - counts[label]
        if deficit <= 0:
            continue
        budget = int(round(beta * deficit))
        if budget == 0:
            continue
        idx = np.flatnonzero(labels == label)
        if len(idx) == 1:
            warnings.warn(
                f"class {label} has a single sample; duplicating with noise",
                stacklevel=2,
            )
            base = subjects[idx[0]]
            for j in range(budget):
                out.append(_jitter_duplicate(base, rng, j))
            continue

        near = np.argsort(d2[idx], axis=1)[:, 1 : k + 1]  # excludes self
        r = np.array([np.mean(labels[row] == majority) for row in near])
        if r.sum() == 0:
            r = np.ones_like(r)
        r_hat = r / r.sum()
        alloc = _largest_remainder(r_hat * budget, budget)

        # interpolation partners come from the k nearest same-class samples
        within = np.argsort(d2[np.ix_(idx, idx)], axis=1)[:, 1 : k + 1]
        for i_local, (i_global, g_i) in enumerate(zip(idx, alloc)):
            base = subjects[i_global]
            pool = idx[within[i_local]]
            for j in range(g_i):
                z_global = int(rng.choice(pool))
                u = float(rng.uniform(0.0, 1.0))
                neighbor = subjects[z_global]
                synth_id = f"{base.subject_id}-syn{len(records):04d}"
                out.append(_interpolate_subjects(base, neighbor, u, synth_id))
                records.append(
                    SynthRecord(synth_id, label, base.subject_id, neighbor.subject_id, u)
                )
    return out, records


def _pairwise_sq_dists(flat: np.ndarray) -> np.ndarray:
    sq = np.sum(flat**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (flat @ flat.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    floors = np.floor(shares).astype(int)
    remainder = total - int(floors.sum())
    order = np.argsort(-(shares - floors), kind="stable")
    floors[order[:remainder]] += 1
    return floors


def _lerp(a: np.ndarray, b: np.ndarray, u: float) -> np.ndarray:
    return a + u * (b - a)


def _interpolate_subjects(base: Subject, nb: Subject, u: float, synth_id: str) -> Subject:
    return Subject(
        subject_id=synth_id,
        label=base.label,
        mod1=Volume3D(_lerp(base.mod1.data, nb.mod1.data, u), base.mod1.spacing),
        mod2=Volume3D(_lerp(base.mod2.data, nb.mod2.data, u), base.mod2.spacing),
        field1=DisplacementField(_lerp(base.field1.vectors, nb.field1.vectors, u)),
        field2=DisplacementField(_lerp(base.field2.vectors, nb.field2.vectors, u)),
        jsm1=JacobianSaliencyMap(_lerp(base.jsm1.values, nb.jsm1.values, u)),
        jsm2=JacobianSaliencyMap(_lerp(base.jsm2.values, nb.jsm2.values, u)),
        atrophy_mask=base.atrophy_mask.copy(),
        marker_class=base.marker_class,
    )


def _jitter_duplicate(base: Subject, rng: np.random.Generator, j: int) -> Subject:
    noise = rng.normal(0.0, 1e-3, size=base.mod1.dims)
    return Subject(
        subject_id=f"{base.subject_id}-dup{j:04d}",
        label=base.label,
        mod1=Volume3D(np.clip(base.mod1.data + noise, 0.0, 1.0), base.mod1.spacing),
        mod2=Volume3D(np.clip(base.mod2.data + noise, 0.0, 1.0), base.mod2.spacing),
        field1=DisplacementField(base.field1.vectors.copy()),
        field2=DisplacementField(base.field2.vectors.copy()),
        jsm1=JacobianSaliencyMap(base.jsm1.values.copy()),
        jsm2=JacobianSaliencyMap(base.jsm2.values.copy()),
        atrophy_mask=base.atrophy_mask.copy(),
        marker_class=base.marker_class,
    )
