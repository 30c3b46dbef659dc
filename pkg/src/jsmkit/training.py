"""Training with the Jacobian-augmented loss, plus early/late modality fusion.

The loss is cross-entropy plus ``lambda`` times the squared input gradient of
the summed log class probabilities, masked per voxel by ``w * jsm`` where
``w`` is the two-valued weight mask derived from the saliency map. The
penalty is averaged over the batch so ``lambda`` keeps its meaning across
batch sizes, and its parameter gradient is obtained by double
backpropagation through the recorded graph.

With ``lambda == 0`` the penalty machinery is skipped entirely: training
reduces bit-for-bit to plain cross-entropy SGD.
"""

from __future__ import annotations

import configparser
import csv
from dataclasses import dataclass, field as dc_field
from enum import Enum

import numpy as np

from .autodiff import nn
from .autodiff import tensor as T
from .errors import ConfigError, InputError, NumericsError
from .saliency import (
    DEFAULT_DEBUG_WEIGHT,
    DEFAULT_FEATURE_WEIGHT,
    DEFAULT_FLAT_TOL,
    JacobianSaliencyMap,
    weight_mask,
)


class FusionMode(Enum):
    EARLY = "early"
    LATE = "late"


@dataclass
class JALConfig:
    lam: float = 1.0
    feature_weight: float = DEFAULT_FEATURE_WEIGHT
    debug_weight: float = DEFAULT_DEBUG_WEIGHT
    flat_tol: float = DEFAULT_FLAT_TOL
    epochs: int = 20
    batch_size: int = 10
    learning_rate: float = 0.01
    seed: int = 0
    activation: str = nn.SOFTPLUS
    beta: float = 10.0
    channels: tuple[int, int] = (4, 8)

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")


@dataclass
class TrainHistory:
    ce: list[float] = dc_field(default_factory=list)
    penalty: list[float] = dc_field(default_factory=list)
    total: list[float] = dc_field(default_factory=list)
    accuracy: list[float] = dc_field(default_factory=list)

    def append(self, ce, penalty, total, accuracy):
        for v in (ce, penalty, total, accuracy):
            if not np.isfinite(v):
                raise NumericsError(f"non-finite history entry: {v}")
        self.ce.append(ce)
        self.penalty.append(penalty)
        self.total.append(total)
        self.accuracy.append(accuracy)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "ce", "penalty", "total", "acc"])
            rows = zip(self.ce, self.penalty, self.total, self.accuracy)
            for epoch, (ce, pen, tot, acc) in enumerate(rows):
                writer.writerow([epoch, repr(ce), repr(pen), repr(tot), repr(acc)])


@dataclass
class Sample:
    """One training example: per-modality images and saliency maps."""

    mod1: np.ndarray                 # (W, H, D)
    mod2: np.ndarray | None
    jsm1: np.ndarray                 # (W, H, D)
    jsm2: np.ndarray | None
    label: int


def weighted_map(jsm: np.ndarray, config: JALConfig) -> np.ndarray:
    """The per-voxel penalty map q = w * jsm for one channel."""
    mask = weight_mask(
        JacobianSaliencyMap(jsm),
        config.feature_weight,
        config.debug_weight,
        config.flat_tol,
    )
    return mask.weights * jsm


def jal_loss(
    params: nn.ModelParams,
    x: np.ndarray,
    onehot: np.ndarray,
    jsm: np.ndarray,
    config: JALConfig,
    mode: str = "eval",
    seed: int = 0,
) -> tuple[float, float, float]:
    """(total, ce_term, penalty_term) for one sample or one batch.

    ``jsm`` must be shaped like ``x`` (one map per input channel). The
    penalty always runs in eval mode so it is independent of batch
    composition; with ``lam == 0`` it is skipped and total == ce exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    jsm = np.asarray(jsm, dtype=np.float64)
    if jsm.shape != x.shape:
        raise InputError(f"jsm shape {jsm.shape} != input shape {x.shape}")
    batched = x.ndim == 5
    n = x.shape[0] if batched else 1

    fp = nn.forward(params, x, mode=mode, seed=seed, update_running=False)
    ce = nn.cross_entropy(fp.probs, onehot).item()
    if config.lam == 0.0:
        return ce, ce, 0.0

    if batched:
        q = np.stack([_batch_q(jsm[i], config) for i in range(n)])
    else:
        q = _batch_q(jsm, config)
    fp_eval = nn.forward(params, x, mode="eval", seed=seed)
    penalty = nn.gradient_penalty(fp_eval, q).item() / n
    total = ce + config.lam * penalty
    return total, ce, penalty


def _batch_q(jsm_sample: np.ndarray, config: JALConfig) -> np.ndarray:
    return np.stack([weighted_map(ch, config) for ch in jsm_sample])


@dataclass
class Batch:
    x: np.ndarray        # (B, C, W, H, D)
    onehot: np.ndarray   # (B, K)
    q: np.ndarray        # (B, C, W, H, D), precomputed w * jsm


def ce_step(
    params: nn.ModelParams, batch: Batch, config: JALConfig, dropout_seed: int
) -> tuple[float, float]:
    """Plain cross-entropy SGD step; returns (ce, train accuracy)."""
    fp = nn.forward(params, batch.x, mode="train", seed=dropout_seed)
    loss = nn.cross_entropy(fp.probs, batch.onehot)
    grads = nn.backward(fp, loss)
    _check_step_finite(loss.item(), 0.0, config)
    lr = config.learning_rate
    for key in params.trainable_keys():
        params.tensors[key] = params.tensors[key] - lr * grads[key]
    acc = _accuracy(fp.probs.data, batch.onehot)
    return loss.item(), acc


def jal_step(
    params: nn.ModelParams, batch: Batch, config: JALConfig, dropout_seed: int
) -> tuple[float, float, float, float]:
    """One SGD step on the mean per-sample jacobian-augmented loss.

    Returns (total, ce, penalty, accuracy). Delegates to the plain CE path
    when the penalty weight is zero.
    """
    if batch.x.shape[0] == 0:
        raise InputError("empty batch")
    if config.lam == 0.0:
        ce, acc = ce_step(params, batch, config, dropout_seed)
        return ce, ce, 0.0, acc

    fp = nn.forward(params, batch.x, mode="train", seed=dropout_seed)
    loss = nn.cross_entropy(fp.probs, batch.onehot)
    grads = nn.backward(fp, loss)

    n = batch.x.shape[0]
    fp_eval = nn.forward(params, batch.x, mode="eval")
    penalty_t = nn.gradient_penalty(fp_eval, batch.q)
    keys = list(fp_eval.param_leaves)
    pen_cots = T.grad(penalty_t, [fp_eval.param_leaves[k] for k in keys])
    pen_grads = {k: c.data for k, c in zip(keys, pen_cots)}
    penalty = penalty_t.item() / n
    ce = loss.item()
    _check_step_finite(ce, config.lam * penalty, config)

    lr = config.learning_rate
    scale = config.lam / n
    for key in params.trainable_keys():
        g = grads[key] + scale * pen_grads[key]
        params.tensors[key] = params.tensors[key] - lr * g
    acc = _accuracy(fp.probs.data, batch.onehot)
    return ce + config.lam * penalty, ce, penalty, acc


def _check_step_finite(ce: float, weighted_penalty: float, config: JALConfig) -> None:
    if not (np.isfinite(ce) and np.isfinite(weighted_penalty)):
        raise NumericsError(
            "training loss is not finite: "
            f"ce={ce}, lambda*penalty={weighted_penalty}, lambda={config.lam}"
        )


def _accuracy(probs: np.ndarray, onehot: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.argmax(onehot, axis=1)))


def early_fusion_pack(
    x_mod1: np.ndarray, x_mod2: np.ndarray, jsm_mod1: np.ndarray, jsm_mod2: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Stack two single-channel modalities (and their maps) on a channel axis."""
    for a, b in ((x_mod1, x_mod2), (jsm_mod1, jsm_mod2)):
        if np.shape(a) != np.shape(b):
            raise InputError(f"modality shapes differ: {np.shape(a)} vs {np.shape(b)}")
    if np.shape(x_mod1) != np.shape(jsm_mod1):
        raise InputError("saliency map dims differ from image dims")
    return (
        np.stack([np.asarray(x_mod1), np.asarray(x_mod2)]),
        np.stack([np.asarray(jsm_mod1), np.asarray(jsm_mod2)]),
    )


def late_fusion_predict(p1: nn.PredictionDist, p2: nn.PredictionDist) -> nn.PredictionDist:
    """Arithmetic mean of two branch distributions."""
    a, b = np.asarray(p1.probs), np.asarray(p2.probs)
    if a.shape != b.shape:
        raise InputError(f"class counts differ: {a.shape} vs {b.shape}")
    return nn.PredictionDist(0.5 * (a + b))


@dataclass
class TrainResult:
    mode: FusionMode
    models: list[nn.ModelParams]
    histories: list[TrainHistory]


def train(samples: list[Sample], mode: FusionMode, config: JALConfig, classes: int = 4) -> TrainResult:
    """Fit one fused-input model (early) or two per-modality branches (late)."""
    if not samples:
        raise InputError("empty dataset")
    if mode is FusionMode.EARLY:
        xs, qs, ys = _pack_early(samples, config, classes)
        model, history = _fit(xs, qs, ys, config, in_channels=2)
        return TrainResult(mode, [model], [history])
    results = []
    for modality in (1, 2):
        xs, qs, ys = _pack_single(samples, modality, config, classes)
        results.append(_fit(xs, qs, ys, config, in_channels=1))
    return TrainResult(mode, [m for m, _ in results], [h for _, h in results])


def _pack_early(samples, config, classes):
    xs, qs, ys = [], [], []
    for s in samples:
        if s.mod2 is None or s.jsm2 is None:
            raise InputError("early fusion needs both modalities with saliency maps")
        x, jsm = early_fusion_pack(s.mod1, s.mod2, s.jsm1, s.jsm2)
        xs.append(x)
        qs.append(_batch_q(jsm, config) if config.lam != 0.0 else np.zeros_like(jsm))
        ys.append(_onehot(s.label, classes))
    return np.stack(xs), np.stack(qs), np.stack(ys)


def _pack_single(samples, modality, config, classes):
    xs, qs, ys = [], [], []
    for s in samples:
        img = s.mod1 if modality == 1 else s.mod2
        jsm = s.jsm1 if modality == 1 else s.jsm2
        if img is None or jsm is None:
            raise InputError(f"sample missing modality {modality}")
        x = np.asarray(img)[None]
        xs.append(x)
        qs.append(
            _batch_q(np.asarray(jsm)[None], config)
            if config.lam != 0.0
            else np.zeros_like(x)
        )
        ys.append(_onehot(s.label, classes))
    return np.stack(xs), np.stack(qs), np.stack(ys)


def _onehot(label: int, classes: int) -> np.ndarray:
    if not 0 <= label < classes:
        raise InputError(f"label {label} outside [0, {classes})")
    out = np.zeros(classes)
    out[label] = 1.0
    return out


def _fit(xs, qs, ys, config: JALConfig, in_channels: int):
    dims = xs.shape[2:]
    spec = nn.classifier_spec(
        in_channels=in_channels,
        input_dims=dims,
        channels=config.channels,
        classes=ys.shape[1],
        activation=config.activation,
        beta=config.beta,
    )
    params = nn.build_model(spec, seed=config.seed, in_channels=in_channels, input_dims=dims)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    n = xs.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        tot_ce = tot_pen = tot_total = tot_acc = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = Batch(xs[idx], ys[idx], qs[idx])
            dropout_seed = int(rng.integers(0, 2**63 - 1))
            total, ce, pen, acc = jal_step(params, batch, config, dropout_seed)
            tot_ce += ce
            tot_pen += pen
            tot_total += total
            tot_acc += acc
            batches += 1
        history.append(
            tot_ce / batches, tot_pen / batches, tot_total / batches, tot_acc / batches
        )
    return params, history


# ---------------------------------------------------------------------------
# Structured-text training configuration (key = value; model/jal/data sections)
# ---------------------------------------------------------------------------


def load_train_config(path) -> tuple[JALConfig, dict]:
    """Parse a config file into a JALConfig plus the raw data section."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    jal = parser["jal"] if parser.has_section("jal") else {}
    model = parser["model"] if parser.has_section("model") else {}
    try:
        channels = model.get("channels", "4,8")
        config = JALConfig(
            lam=float(jal.get("lambda", 1.0)),
            feature_weight=float(jal.get("feature_weight", DEFAULT_FEATURE_WEIGHT)),
            debug_weight=float(jal.get("debug_weight", DEFAULT_DEBUG_WEIGHT)),
            flat_tol=float(jal.get("flat_tol", DEFAULT_FLAT_TOL)),
            epochs=int(jal.get("epochs", 20)),
            batch_size=int(jal.get("batch_size", 10)),
            learning_rate=float(jal.get("learning_rate", 0.01)),
            seed=int(jal.get("seed", 0)),
            activation=model.get("activation", nn.SOFTPLUS),
            beta=float(model.get("beta", 10.0)),
            channels=tuple(int(c) for c in channels.split(",")),
        )
    except ValueError as exc:
        raise ConfigError(f"bad value in {path}: {exc}") from exc
    data = dict(parser["data"]) if parser.has_section("data") else {}
    return config, data


def write_train_config(path, config: JALConfig, data: dict | None = None) -> None:
    parser = configparser.ConfigParser()
    parser["model"] = {
        "activation": config.activation,
        "beta": str(config.beta),
        "channels": ",".join(str(c) for c in config.channels),
    }
    parser["jal"] = {
        "lambda": str(config.lam),
        "feature_weight": str(config.feature_weight),
        "debug_weight": str(config.debug_weight),
        "flat_tol": str(config.flat_tol),
        "epochs": str(config.epochs),
        "batch_size": str(config.batch_size),
        "learning_rate": str(config.learning_rate),
        "seed": str(config.seed),
    }
    parser["data"] = {k: str(v) for k, v in (data or {}).items()}
    with open(path, "w") as fh:
        parser.write(fh)
