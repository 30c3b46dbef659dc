"""Metrics, the with/without-penalty ablation protocol, and saliency export.

Sensitivity and specificity are one-vs-rest per class; macro values are
unweighted means over classes whose value is defined. The ablation runner
trains both arms (penalty on / off) from identical seeds on identical data,
so the arms differ in the penalty weight only, and quantifies reliance on
flat-saliency regions as the fraction of absolute input-gradient mass that
falls on debug-weighted voxels.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .autodiff import nn
from .errors import InputError
from .phantoms import Dataset, Subject, adasyn_oversample
from .saliency import JacobianSaliencyMap, weight_mask
from .training import (
    FusionMode,
    JALConfig,
    TrainResult,
    early_fusion_pack,
    late_fusion_predict,
    train,
)
from .volume import Volume3D, write_volume


def confusion(preds, labels, classes: int) -> np.ndarray:
    """Counts with true class on rows, predicted class on columns."""
    p = np.asarray(preds, dtype=np.int64)
    t = np.asarray(labels, dtype=np.int64)
    if p.shape != t.shape or p.ndim != 1:
        raise InputError(f"predictions/labels must be equal-length 1-D, got {p.shape} vs {t.shape}")
    if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= classes):
        raise InputError(f"entries must lie in [0, {classes})")
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


@dataclass
class MetricsReport:
    sensitivity: list[float | None]
    specificity: list[float | None]
    accuracy: list[float]
    macro_sensitivity: float
    macro_specificity: float
    macro_accuracy: float

    def to_dict(self) -> dict:
        return {
            "per_class": {
                "sensitivity": self.sensitivity,
                "specificity": self.specificity,
                "accuracy": self.accuracy,
            },
            "macro": {
                "sensitivity": self.macro_sensitivity,
                "specificity": self.macro_specificity,
                "accuracy": self.macro_accuracy,
            },
        }


def per_class_metrics(cm: np.ndarray) -> MetricsReport:
    """One-vs-rest sensitivity, specificity, and accuracy with macro means.

    A class absent from the ground truth has undefined sensitivity: it is
    reported as None and excluded from the macro average, with a warning.
    """
    cm = np.asarray(cm)
    total = int(cm.sum())
    if total <= 0:
        raise InputError("confusion matrix is empty")
    k = cm.shape[0]
    sens: list[float | None] = []
    spec: list[float | None] = []
    acc: list[float] = []
    for c in range(k):
        tp = int(cm[c, c])
        fn = int(cm[c].sum() - tp)
        fp = int(cm[:, c].sum() - tp)
        tn = total - tp - fn - fp
        if tp + fn == 0:
            warnings.warn(
                f"class {c} absent from ground truth; sensitivity undefined",
                stacklevel=2,
            )
            sens.append(None)
        else:
            sens.append(tp / (tp + fn))
        spec.append(tn / (tn + fp) if tn + fp > 0 else None)
        acc.append((tp + tn) / total)
    return MetricsReport(
        sensitivity=sens,
        specificity=spec,
        accuracy=acc,
        macro_sensitivity=_macro(sens),
        macro_specificity=_macro(spec),
        macro_accuracy=_macro(acc),
    )


def _macro(values) -> float:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else float("nan")


def predict_subjects(result: TrainResult, subjects: list[Subject]) -> np.ndarray:
    """Predicted class per subject under the trained fusion setup."""
    if result.mode is FusionMode.EARLY:
        xs = np.stack([
            early_fusion_pack(s.mod1.data, s.mod2.data, s.jsm1.values, s.jsm2.values)[0]
            for s in subjects
        ])
        return nn.predict(result.models[0], xs).argmax()
    x1 = np.stack([s.mod1.data[None] for s in subjects])
    x2 = np.stack([s.mod2.data[None] for s in subjects])
    fused = late_fusion_predict(
        nn.predict(result.models[0], x1), nn.predict(result.models[1], x2)
    )
    return fused.argmax()


def debug_region(jsm_values: np.ndarray, config: JALConfig) -> np.ndarray:
    mask = weight_mask(
        JacobianSaliencyMap(jsm_values),
        config.feature_weight, config.debug_weight, config.flat_tol,
    )
    return mask.weights == config.debug_weight


def gradient_mass_fraction(result: TrainResult, subject: Subject, config: JALConfig) -> float:
    """Share of |input gradient| mass falling on debug-weighted voxels."""
    debug1 = debug_region(subject.jsm1.values, config)
    debug2 = debug_region(subject.jsm2.values, config)
    if result.mode is FusionMode.EARLY:
        x, _ = early_fusion_pack(
            subject.mod1.data, subject.mod2.data, subject.jsm1.values, subject.jsm2.values
        )
        g = np.abs(nn.input_gradient(result.models[0], x))
        num = g[0][debug1].sum() + g[1][debug2].sum()
        den = g.sum()
    else:
        g1 = np.abs(nn.input_gradient(result.models[0], subject.mod1.data[None]))[0]
        g2 = np.abs(nn.input_gradient(result.models[1], subject.mod2.data[None]))[0]
        num = g1[debug1].sum() + g2[debug2].sum()
        den = g1.sum() + g2.sum()
    return float(num / den) if den > 0 else 0.0


@dataclass
class ArmOutcome:
    metrics: MetricsReport
    batch_histograms: dict[str, list[int]]
    batch_values: dict[str, list[float]]
    debug_gradient_fraction: float
    history_csvs: list[list[float]] = dc_field(default_factory=list)


@dataclass
class AblationReport:
    mode: str
    with_jal: ArmOutcome
    without_jal: ArmOutcome
    config_diff: dict
    seed: int

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "config_diff": self.config_diff,
            "with_jal": _arm_dict(self.with_jal),
            "without_jal": _arm_dict(self.without_jal),
        }


def _arm_dict(arm: ArmOutcome) -> dict:
    return {
        "metrics": arm.metrics.to_dict(),
        "batch_histograms": arm.batch_histograms,
        "debug_gradient_fraction": arm.debug_gradient_fraction,
    }


HISTOGRAM_BINS = 10


def _batch_metric_histograms(preds, labels, classes, batch_size):
    values = {"accuracy": [], "sensitivity": [], "specificity": []}
    for start in range(0, len(labels), batch_size):
        p = preds[start : start + batch_size]
        t = labels[start : start + batch_size]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # tiny batches may miss classes
            report = per_class_metrics(confusion(p, t, classes))
        values["accuracy"].append(float(np.mean(p == t)))
        values["sensitivity"].append(report.macro_sensitivity)
        values["specificity"].append(report.macro_specificity)
    histograms = {
        key: np.histogram(vals, bins=HISTOGRAM_BINS, range=(0.0, 1.0))[0].tolist()
        for key, vals in values.items()
    }
    return histograms, values


def train_arm(dataset: Dataset, mode: FusionMode, config: JALConfig) -> TrainResult:
    """ADASYN-balance the train split, then fit the requested fusion setup."""
    balanced, _ = adasyn_oversample(dataset.train_subjects(), seed=config.seed)
    from .datastore import to_samples

    return train(to_samples(balanced), mode, config)


def evaluate_arm(
    result: TrainResult, dataset: Dataset, config: JALConfig, classes: int = 4
) -> ArmOutcome:
    test = dataset.test_subjects()
    preds = predict_subjects(result, test)
    labels = np.array([s.label for s in test])
    metrics = per_class_metrics(confusion(preds, labels, classes))
    histograms, values = _batch_metric_histograms(preds, labels, classes, config.batch_size)
    fractions = [gradient_mass_fraction(result, s, config) for s in test]
    return ArmOutcome(
        metrics=metrics,
        batch_histograms=histograms,
        batch_values=values,
        debug_gradient_fraction=float(np.mean(fractions)),
    )


def ablate(dataset: Dataset, mode: FusionMode, config: JALConfig) -> AblationReport:
    """Train and evaluate penalty-on vs penalty-off arms under shared seeds."""
    if config.lam <= 0:
        raise InputError("the ablation needs a positive penalty weight for the on-arm")
    arm_on = train_arm(dataset, mode, config)
    arm_off = train_arm(dataset, mode, replace(config, lam=0.0))
    return AblationReport(
        mode=mode.value,
        with_jal=evaluate_arm(arm_on, dataset, config),
        without_jal=evaluate_arm(arm_off, dataset, config),
        config_diff={"lambda": [config.lam, 0.0]},
        seed=config.seed,
    )


def write_ablation_report(report: AblationReport, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"ablation_{report.mode}.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    path = os.path.join(out_dir, f"ablation_{report.mode}_batches.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "metric", "batch", "value"])
        for arm_name, arm in (("with_jal", report.with_jal), ("without_jal", report.without_jal)):
            for metric, vals in arm.batch_values.items():
                for i, v in enumerate(vals):
                    writer.writerow([arm_name, metric, i, repr(float(v))])


# ---------------------------------------------------------------------------
# Saliency overlays
# ---------------------------------------------------------------------------


def _normalize(g: np.ndarray) -> np.ndarray:
    peak = np.abs(g).max()
    return np.abs(g) / peak if peak > 0 else np.zeros_like(g)


def _rank(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    ranks[order] = np.arange(values.size)
    return ranks


def rank_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman correlation of two flattened maps."""
    ra, rb = _rank(a.ravel()), _rank(b.ravel())
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra**2).sum() * (rb**2).sum())
    return float((ra * rb).sum() / denom) if denom > 0 else 0.0


def _write_midslices(volume: np.ndarray, base: str) -> None:
    w, h, d = volume.shape
    views = {
        "axial": volume[:, :, d // 2],
        "sagittal": volume[w // 2, :, :],
        "coronal": volume[:, h // 2, :],
    }
    for name, grid in views.items():
        with open(f"{base}.{name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in grid:
                writer.writerow([repr(float(v)) for v in row])


def export_saliency(result: TrainResult, subject: Subject, out_dir) -> dict:
    """Write normalized |input gradient| volumes, saliency maps, and slices.

    Returns the sidecar summary (also written as JSON), including the rank
    correlation between each gradient map and the deformation magnitude
    |jsm - 1|.
    """
    os.makedirs(out_dir, exist_ok=True)
    if result.mode is FusionMode.EARLY:
        x, _ = early_fusion_pack(
            subject.mod1.data, subject.mod2.data, subject.jsm1.values, subject.jsm2.values
        )
        g = nn.input_gradient(result.models[0], x)
        grads = [g[0], g[1]]
    else:
        grads = [
            nn.input_gradient(result.models[0], subject.mod1.data[None])[0],
            nn.input_gradient(result.models[1], subject.mod2.data[None])[0],
        ]

    summary = {"subject": subject.subject_id, "mode": result.mode.value, "modalities": {}}
    for m, (grad, jsm) in enumerate(zip(grads, (subject.jsm1, subject.jsm2)), start=1):
        norm = _normalize(grad)
        base = os.path.join(out_dir, f"{subject.subject_id}.grad{m}")
        write_volume(Volume3D(norm), base + ".jsmv")
        write_volume(
            Volume3D(jsm.values), os.path.join(out_dir, f"{subject.subject_id}.jsm{m}.jsmv")
        )
        _write_midslices(norm, base)
        summary["modalities"][f"mod{m}"] = {
            "gradient_file": os.path.basename(base + ".jsmv"),
            "rank_correlation_vs_deformation": rank_correlation(
                norm, np.abs(jsm.values - 1.0)
            ),
        }
    with open(os.path.join(out_dir, f"{subject.subject_id}.summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary
