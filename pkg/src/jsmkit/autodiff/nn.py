"""3D CNN layers on the autodiff engine, sized for desk-scale volumes.

The reference stack is two conv/batchnorm/activation/dropout/maxpool blocks
followed by flatten and a dense classifier head: channels 1 -> 4 -> 8,
kernels 3x3x3 stride 1 padding 1, pools 2x2x2 stride 2, batch-norm momentum
0.9, dropout 0.5 then 0.2. Convolution geometry is fixed to that shape.

Batch statistics are used in train mode; eval mode and the input-gradient
path use running statistics so per-sample gradients do not depend on batch
composition.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataFormatError, InputError
from . import tensor as T
from .tensor import Tensor

RELU = "relu"
SOFTPLUS = "softplus"


@dataclass(frozen=True)
class Conv3d:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class BatchNorm3d:
    channels: int
    momentum: float = 0.9
    eps: float = 1e-5


@dataclass(frozen=True)
class Activation:
    kind: str = SOFTPLUS
    beta: float = 10.0


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class MaxPool3d:
    kernel: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


LayerSpec = list


def classifier_spec(
    in_channels: int = 1,
    input_dims: tuple[int, int, int] = (16, 16, 16),
    channels: tuple[int, int] = (4, 8),
    classes: int = 4,
    activation: str = SOFTPLUS,
    beta: float = 10.0,
    dropout_rates: tuple[float, float] = (0.5, 0.2),
) -> LayerSpec:
    """The two-block classifier stack at configurable scale."""
    c1, c2 = channels
    w, h, d = input_dims
    if any(n % 4 != 0 for n in (w, h, d)):
        raise ConfigError(f"input dims must survive two 2x pools, got {input_dims}")
    flat = c2 * (w // 4) * (h // 4) * (d // 4)
    return [
        Conv3d(in_channels, c1),
        BatchNorm3d(c1),
        Activation(activation, beta),
        Dropout(dropout_rates[0]),
        MaxPool3d(),
        Conv3d(c1, c2),
        BatchNorm3d(c2),
        Activation(activation, beta),
        Dropout(dropout_rates[1]),
        MaxPool3d(),
        Flatten(),
        Dense(flat, classes),
    ]


def spec_output_classes(spec: LayerSpec) -> int:
    for layer in reversed(spec):
        if isinstance(layer, Dense):
            return layer.out_features
    raise ConfigError("layer spec has no dense head")


def validate_spec(spec: LayerSpec, in_channels: int, input_dims) -> None:
    """Walk the shape arithmetic and name the first offending layer pair."""
    c = in_channels
    dims = list(input_dims)
    flat = None
    for i, layer in enumerate(spec):
        where = f"layer {i} ({type(layer).__name__})"
        if isinstance(layer, Conv3d):
            if flat is not None:
                raise ConfigError(f"{where}: convolution after flatten")
            if (layer.kernel, layer.stride, layer.padding) != (3, 1, 1):
                raise ConfigError(f"{where}: only kernel 3, stride 1, padding 1 supported")
            if layer.in_channels != c:
                raise ConfigError(
                    f"{where}: expects {layer.in_channels} channels, gets {c}"
                )
            c = layer.out_channels
        elif isinstance(layer, BatchNorm3d):
            if layer.channels != c:
                raise ConfigError(f"{where}: normalizes {layer.channels} channels, gets {c}")
        elif isinstance(layer, MaxPool3d):
            if (layer.kernel, layer.stride) != (2, 2):
                raise ConfigError(f"{where}: only kernel 2, stride 2 supported")
            if any(n % 2 != 0 for n in dims):
                raise ConfigError(f"{where}: odd extent in {tuple(dims)}")
            dims = [n // 2 for n in dims]
        elif isinstance(layer, Flatten):
            flat = c * int(np.prod(dims))
        elif isinstance(layer, Dense):
            expect = flat if flat is not None else c * int(np.prod(dims))
            if layer.in_features != expect:
                raise ConfigError(
                    f"{where}: expects {layer.in_features} features, gets {expect}"
                )
            flat = layer.out_features
        elif isinstance(layer, (Activation, Dropout)):
            pass
        else:
            raise ConfigError(f"{where}: unknown layer type")


@dataclass
class ModelParams:
    """Trainable arrays plus batch-norm running statistics, keyed per layer."""

    spec: LayerSpec
    in_channels: int
    input_dims: tuple[int, int, int]
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(
            list(self.spec), self.in_channels, tuple(self.input_dims),
            {k: v.copy() for k, v in self.tensors.items()},
        )

    def trainable_keys(self) -> list[str]:
        return [k for k in self.tensors if not k.endswith("_running")]


def build_model(
    spec: LayerSpec,
    seed: int,
    in_channels: int = 1,
    input_dims: tuple[int, int, int] = (16, 16, 16),
) -> ModelParams:
    """He-style fan-in initialization, deterministic for a given seed."""
    validate_spec(spec, in_channels, input_dims)
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for i, layer in enumerate(spec):
        if isinstance(layer, Conv3d):
            fan_in = layer.in_channels * layer.kernel ** 3
            tensors[f"{i}.weight"] = rng.normal(
                0.0, np.sqrt(2.0 / fan_in), size=(layer.out_channels, layer.in_channels, 3, 3, 3)
            )
            tensors[f"{i}.bias"] = np.zeros(layer.out_channels)
        elif isinstance(layer, Dense):
            tensors[f"{i}.weight"] = rng.normal(
                0.0, np.sqrt(2.0 / layer.in_features),
                size=(layer.in_features, layer.out_features),
            )
            tensors[f"{i}.bias"] = np.zeros(layer.out_features)
        elif isinstance(layer, BatchNorm3d):
            tensors[f"{i}.scale"] = np.ones(layer.channels)
            tensors[f"{i}.shift"] = np.zeros(layer.channels)
            tensors[f"{i}.mean_running"] = np.zeros(layer.channels)
            tensors[f"{i}.var_running"] = np.ones(layer.channels)
    return ModelParams(list(spec), in_channels, tuple(input_dims), tensors)


class PredictionDist:
    """A (batch of) class probability distribution(s); rows sum to 1."""

    def __init__(self, probs):
        arr = np.asarray(probs, dtype=np.float64)
        rows = arr if arr.ndim == 2 else arr[None]
        if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-9):
            raise InputError("probabilities must be nonnegative and sum to 1")
        self.probs = arr

    @property
    def classes(self) -> int:
        return self.probs.shape[-1]

    def argmax(self) -> np.ndarray:
        return np.argmax(self.probs, axis=-1)


def predict(params: "ModelParams", x: np.ndarray, seed: int = 0) -> PredictionDist:
    """Eval-mode class probabilities for a sample or a batch."""
    fp = forward(params, x, mode="eval", seed=seed)
    probs = fp.probs.data
    return PredictionDist(probs if np.asarray(x).ndim == 5 else probs[0])


class ForwardPass:
    """One recorded forward computation: probabilities plus graph handles."""

    def __init__(self, probs, logprobs, tape, input_leaf, param_leaves):
        self.probs = probs            # Tensor (B, K)
        self.logprobs = logprobs      # Tensor (B, K), numerically stable
        self.tape = tape
        self.input_leaf = input_leaf  # Tensor (B, C, W, H, D)
        self.param_leaves = param_leaves  # dict key -> Tensor


def forward(
    params: ModelParams,
    x: np.ndarray,
    mode: str = "eval",
    seed: int = 0,
    update_running: bool = True,
) -> ForwardPass:
    """Run the network; dropout and batch statistics apply in train mode only."""
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be train or eval, got {mode!r}")
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 4
    if single:
        arr = arr[None]
    expect = (params.in_channels, *params.input_dims)
    if arr.shape[1:] != expect:
        raise InputError(f"input shape {arr.shape[1:]} does not match model {expect}")

    rng = np.random.default_rng(seed)
    tape = T.Tape()
    with tape:
        leaf = Tensor(arr)
        param_leaves = {k: Tensor(v) for k, v in params.tensors.items()}
        h = leaf
        for i, layer in enumerate(params.spec):
            if isinstance(layer, Conv3d):
                h = _conv3d(h, param_leaves[f"{i}.weight"], param_leaves[f"{i}.bias"], layer)
            elif isinstance(layer, BatchNorm3d):
                h = _batchnorm(h, params, param_leaves, i, layer, mode, update_running)
            elif isinstance(layer, Activation):
                h = T.relu(h) if layer.kind == RELU else T.softplus(h, layer.beta)
            elif isinstance(layer, Dropout):
                if mode == "train" and layer.rate > 0.0:
                    keep = (rng.random(h.shape) >= layer.rate) / (1.0 - layer.rate)
                    h = T.mul(h, Tensor(keep))
            elif isinstance(layer, MaxPool3d):
                h = _maxpool2(h)
            elif isinstance(layer, Flatten):
                h = T.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
            elif isinstance(layer, Dense):
                h = T.add(
                    T.matmul(h, param_leaves[f"{i}.weight"]),
                    param_leaves[f"{i}.bias"],
                )
        probs, logprobs = _softmax(h)
    return ForwardPass(probs, logprobs, tape, leaf, param_leaves)


def _conv3d(h, weight, bias, layer: Conv3d):
    b, c, w, hh, d = h.shape
    cols = T.im2col3d(h)                                   # (B*L, C*27)
    wmat = T.reshape(weight, (layer.out_channels, c * 27))
    out = T.add(T.matmul(cols, T.transpose(wmat, (1, 0))), bias)
    out = T.reshape(out, (b, w, hh, d, layer.out_channels))
    return T.transpose(out, (0, 4, 1, 2, 3))


def _maxpool2(h):
    b, c, w, hh, d = h.shape
    g = T.reshape(h, (b, c, w // 2, 2, hh // 2, 2, d // 2, 2))
    g = T.transpose(g, (0, 1, 2, 4, 6, 3, 5, 7))
    g = T.reshape(g, (b, c, w // 2, hh // 2, d // 2, 8))
    idx = np.argmax(g.data, axis=-1)
    return T.take_last(g, idx)


def _batchnorm(h, params, param_leaves, i, layer: BatchNorm3d, mode, update_running):
    cshape = (1, layer.channels, 1, 1, 1)
    scale = T.reshape(param_leaves[f"{i}.scale"], cshape)
    shift = T.reshape(param_leaves[f"{i}.shift"], cshape)
    if mode == "train":
        axes = (0, 2, 3, 4)
        mu = T.tmean(h, axis=axes, keepdims=True)
        centered = T.sub(h, mu)
        var = T.tmean(T.mul(centered, centered), axis=axes, keepdims=True)
        inv = T.power(T.add(var, Tensor(layer.eps)), -0.5)
        out = T.add(T.mul(T.mul(centered, inv), scale), shift)
        if update_running:
            m = layer.momentum
            params.tensors[f"{i}.mean_running"] = (
                m * params.tensors[f"{i}.mean_running"] + (1 - m) * mu.data.reshape(-1)
            )
            params.tensors[f"{i}.var_running"] = (
                m * params.tensors[f"{i}.var_running"] + (1 - m) * var.data.reshape(-1)
            )
        return out
    mean = Tensor(params.tensors[f"{i}.mean_running"].reshape(cshape))
    inv = Tensor((params.tensors[f"{i}.var_running"].reshape(cshape) + layer.eps) ** -0.5)
    return T.add(T.mul(T.mul(T.sub(h, mean), inv), scale), shift)


def _softmax(logits):
    stable = T.sub(logits, Tensor(logits.data.max(axis=1, keepdims=True)))
    e = T.exp(stable)
    total = T.tsum(e, axis=1, keepdims=True)
    probs = T.mul(e, T.power(total, -1.0))
    logprobs = T.sub(stable, T.log(total))
    return probs, logprobs


PROB_FLOOR = 1e-12


def cross_entropy(probs: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean over the batch of -log(probability at the true class)."""
    y = np.asarray(onehot, dtype=np.float64)
    if y.ndim == 1:
        y = y[None]
    if y.shape != probs.shape:
        raise InputError(f"labels shape {y.shape} != predictions {probs.shape}")
    picked = T.tsum(T.mul(probs, Tensor(y)), axis=1)
    return T.tmean(T.neg(T.log(T.maximum_const(picked, PROB_FLOOR))))


def backward(fp: ForwardPass, loss: Tensor) -> dict[str, np.ndarray]:
    """First-order gradients of a scalar loss for every parameter and the input.

    Parameters the loss never touches get zero gradients.
    """
    keys = list(fp.param_leaves)
    leaves = [fp.param_leaves[k] for k in keys] + [fp.input_leaf]
    cots = T.grad(loss, leaves, create_graph=False)
    out = {k: c.data for k, c in zip(keys, cots[:-1])}
    out["__input__"] = cots[-1].data
    return out


def log_prob_sum(fp: ForwardPass) -> Tensor:
    """Sum over classes (and batch) of log predicted probabilities."""
    return T.tsum(fp.logprobs)


def input_gradient(params: ModelParams, x: np.ndarray, seed: int = 0) -> np.ndarray:
    """d(sum_k log y_k)/dx in eval mode; plain array for inspection."""
    fp = forward(params, x, mode="eval", seed=seed)
    g = T.grad(log_prob_sum(fp), [fp.input_leaf], create_graph=False)[0]
    return g.data if np.asarray(x).ndim == 5 else g.data[0]


def input_gradient_graph(fp: ForwardPass) -> Tensor:
    """Input gradient recorded on the tape, still differentiable."""
    return T.grad(log_prob_sum(fp), [fp.input_leaf], create_graph=True)[0]


def gradient_penalty(fp: ForwardPass, weighted_map: np.ndarray) -> Tensor:
    """Sum over everything of (q * input_gradient)^2 for a constant map q."""
    q = np.asarray(weighted_map, dtype=np.float64)
    if q.ndim == 4:
        q = q[None]
    if q.shape != fp.input_leaf.shape:
        raise InputError(
            f"weighted map shape {q.shape} != input {fp.input_leaf.shape}"
        )
    g = input_gradient_graph(fp)
    masked = T.mul(g, Tensor(q))
    return T.tsum(T.mul(masked, masked))


def penalty_param_gradient(
    params: ModelParams, x: np.ndarray, weighted_map: np.ndarray, seed: int = 0
) -> dict[str, np.ndarray]:
    """Parameter gradients of the squared masked input-gradient penalty.

    Differentiates through the recorded backward pass (double backprop).
    """
    fp = forward(params, x, mode="eval", seed=seed)
    penalty = gradient_penalty(fp, weighted_map)
    keys = [k for k in fp.param_leaves]
    cots = T.grad(penalty, [fp.param_leaves[k] for k in keys], create_graph=False)
    return {k: c.data for k, c in zip(keys, cots)}


# ---------------------------------------------------------------------------
# Checkpoints: magic/version header, layer descriptor table, then parameter
# tensors (native-endian float64) in declaration order. Round-trip exact.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"JSMM"
_CKPT_VERSION = 1

_LAYER_CODES = {
    Conv3d: 0, BatchNorm3d: 1, Activation: 2, Dropout: 3,
    MaxPool3d: 4, Flatten: 5, Dense: 6,
}
_ACT_CODES = {RELU: 0, SOFTPLUS: 1}


def _descriptor(layer) -> tuple[int, float, float, float]:
    if isinstance(layer, Conv3d):
        return (0, layer.in_channels, layer.out_channels, 0.0)
    if isinstance(layer, BatchNorm3d):
        return (1, layer.channels, layer.momentum, layer.eps)
    if isinstance(layer, Activation):
        return (2, _ACT_CODES[layer.kind], layer.beta, 0.0)
    if isinstance(layer, Dropout):
        return (3, layer.rate, 0.0, 0.0)
    if isinstance(layer, MaxPool3d):
        return (4, 0.0, 0.0, 0.0)
    if isinstance(layer, Flatten):
        return (5, 0.0, 0.0, 0.0)
    if isinstance(layer, Dense):
        return (6, layer.in_features, layer.out_features, 0.0)
    raise ConfigError(f"cannot serialize layer {layer!r}")


def _layer_from_descriptor(code, a, b, c):
    if code == 0:
        return Conv3d(int(a), int(b))
    if code == 1:
        return BatchNorm3d(int(a), b, c)
    if code == 2:
        kind = RELU if int(a) == 0 else SOFTPLUS
        return Activation(kind, b)
    if code == 3:
        return Dropout(a)
    if code == 4:
        return MaxPool3d()
    if code == 5:
        return Flatten()
    if code == 6:
        return Dense(int(a), int(b))
    raise DataFormatError(f"unknown layer code {code}")


def save_model(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(
            struct.pack(
                "<5I", len(params.spec), params.in_channels, *params.input_dims
            )
        )
        for layer in params.spec:
            code, a, b, c = _descriptor(layer)
            fh.write(struct.pack("<I3d", code, float(a), float(b), float(c)))
        for key in sorted(params.tensors):
            name = key.encode()
            arr = params.tensors[key]
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(np.float64, copy=False).tobytes())


def load_model(path) -> ModelParams:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise DataFormatError(f"{path}: bad checkpoint magic at offset 0")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        n_layers, in_ch, d0, d1, d2 = struct.unpack("<5I", fh.read(20))
        spec = []
        for _ in range(n_layers):
            code, a, b, c = struct.unpack("<I3d", fh.read(28))
            spec.append(_layer_from_descriptor(code, a, b, c))
        tensors = {}
        while True:
            raw = fh.read(4)
            if not raw:
                break
            (n,) = struct.unpack("<I", raw)
            key = fh.read(n).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape))
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise DataFormatError(f"{path}: truncated tensor payload for {key}")
            tensors[key] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    return ModelParams(spec, in_ch, (d0, d1, d2), tensors)
