"""On-disk dataset layout: a manifest plus native volume files per subject.

    <dir>/manifest.txt            structured text (key = value header, then
                                  one `id label split marker` line per subject)
    <dir>/template.jsmv
    <dir>/<id>.mod1.jsmv          images (dtype 0)
    <dir>/<id>.mod2.jsmv
    <dir>/<id>.field1.jsmv        displacement fields (dtype 1)
    <dir>/<id>.field2.jsmv
    <dir>/<id>.jsm1.jsmv          saliency maps (dtype 0)
    <dir>/<id>.jsm2.jsmv
    <dir>/<id>.mask.jsmv          atrophy mask as 0/1 floats
"""

from __future__ import annotations

import os
from dataclasses import asdict

import numpy as np

from .errors import DataFormatError
from .fields import read_field, write_field
from .phantoms import CLASS_NAMES, Dataset, PhantomSpec, Subject, make_template
from .saliency import JacobianSaliencyMap
from .training import Sample
from .volume import Volume3D, read_volume, write_volume

_NO_MARKER = -1


def save_dataset(dataset: Dataset, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write("format = jsmkit-dataset-v1\n")
        for key, value in asdict(dataset.spec).items():
            fh.write(f"spec.{key} = {_render(value)}\n")
        fh.write(f"subjects = {len(dataset.subjects)}\n")
        fh.write("columns = id label split marker\n")
        for s in dataset.subjects:
            marker = _NO_MARKER if s.marker_class is None else s.marker_class
            fh.write(f"{s.subject_id} {s.label} {dataset.split[s.subject_id]} {marker}\n")
    write_volume(make_template(dataset.spec), os.path.join(out_dir, "template.jsmv"))
    for s in dataset.subjects:
        base = os.path.join(out_dir, s.subject_id)
        write_volume(s.mod1, base + ".mod1.jsmv")
        write_volume(s.mod2, base + ".mod2.jsmv")
        write_field(s.field1, base + ".field1.jsmv")
        write_field(s.field2, base + ".field2.jsmv")
        write_volume(Volume3D(s.jsm1.values), base + ".jsm1.jsmv")
        write_volume(Volume3D(s.jsm2.values), base + ".jsm2.jsmv")
        write_volume(Volume3D(s.atrophy_mask.astype(np.float64)), base + ".mask.jsmv")
    return manifest


def _render(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_spec(pairs: dict[str, str]) -> PhantomSpec:
    def floats(key, default):
        raw = pairs.get(key)
        return default if raw is None else tuple(float(v) for v in raw.split(","))

    def ints(key, default):
        raw = pairs.get(key)
        return default if raw is None else tuple(int(v) for v in raw.split(","))

    base = PhantomSpec()
    center = pairs.get("spec.atrophy_center")
    radius = pairs.get("spec.atrophy_radius")
    return PhantomSpec(
        dims=ints("spec.dims", base.dims),
        template_blobs=int(pairs.get("spec.template_blobs", base.template_blobs)),
        blob_sigma=floats("spec.blob_sigma", base.blob_sigma),
        texture_weight=float(pairs.get("spec.texture_weight", base.texture_weight)),
        noise_sigma=float(pairs.get("spec.noise_sigma", base.noise_sigma)),
        amplitudes=floats("spec.amplitudes", base.amplitudes),
        atrophy_center=None if center in (None, "None") else tuple(float(v) for v in center.split(",")),
        atrophy_radius=None if radius in (None, "None") else float(radius),
        individual_sigma=float(pairs.get("spec.individual_sigma", base.individual_sigma)),
        marker_size=int(pairs.get("spec.marker_size", base.marker_size)),
        marker_levels=floats("spec.marker_levels", base.marker_levels),
        confound_train=pairs.get("spec.confound_train", str(base.confound_train)) == "True",
        seed=int(pairs.get("spec.seed", base.seed)),
    )


def load_dataset(in_dir) -> Dataset:
    manifest = os.path.join(in_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise DataFormatError(f"{manifest}: missing manifest")
    pairs: dict[str, str] = {}
    rows: list[tuple[str, int, str, int]] = []
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if " = " in line:
                key, _, value = line.partition(" = ")
                pairs[key.strip()] = value.strip()
            else:
                parts = line.split()
                if len(parts) != 4:
                    raise DataFormatError(f"{manifest}: bad subject row {line!r}")
                rows.append((parts[0], int(parts[1]), parts[2], int(parts[3])))
    if pairs.get("format") != "jsmkit-dataset-v1":
        raise DataFormatError(f"{manifest}: unknown format {pairs.get('format')!r}")
    if len(rows) != int(pairs.get("subjects", -1)):
        raise DataFormatError(
            f"{manifest}: subject count mismatch "
            f"({len(rows)} rows, header says {pairs.get('subjects')})"
        )

    spec = _parse_spec(pairs)
    subjects = []
    split = {}
    for sid, label, tag, marker in rows:
        if tag not in ("train", "test"):
            raise DataFormatError(f"{manifest}: bad split tag {tag!r} for {sid}")
        base = os.path.join(in_dir, sid)
        subjects.append(
            Subject(
                subject_id=sid,
                label=label,
                mod1=read_volume(base + ".mod1.jsmv"),
                mod2=read_volume(base + ".mod2.jsmv"),
                field1=read_field(base + ".field1.jsmv"),
                field2=read_field(base + ".field2.jsmv"),
                jsm1=JacobianSaliencyMap(read_volume(base + ".jsm1.jsmv").data),
                jsm2=JacobianSaliencyMap(read_volume(base + ".jsm2.jsmv").data),
                atrophy_mask=read_volume(base + ".mask.jsmv").data > 0.5,
                marker_class=None if marker == _NO_MARKER else marker,
            )
        )
        split[sid] = tag
    return Dataset(subjects, split, spec)


def to_samples(subjects: list[Subject]) -> list[Sample]:
    return [
        Sample(
            mod1=s.mod1.data, mod2=s.mod2.data,
            jsm1=s.jsm1.values, jsm2=s.jsm2.values, label=s.label,
        )
        for s in subjects
    ]


def class_name(label: int) -> str:
    return CLASS_NAMES[label]
