"""Layer definitions, network assembly, forward pass, and gradients.

The network is an ordered list of layer specs applied to a single volume
shaped [C x D x H x W].  Internally every operation runs with a leading
batch axis; the public single-sample entry points wrap a batch of one.
Convolution is cross-correlation (no kernel flip) with explicit zero
padding, implemented as im2col plus one matrix product per layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .tensor import Tensor, require_finite

# ---------------------------------------------------------------------------
# Layer specs and model configuration


@dataclass(frozen=True)
class Conv3d:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"conv kernel must be odd and >= 1, got {self.kernel}")
        if self.stride < 1:
            raise ConfigError(f"conv stride must be >= 1, got {self.stride}")
        if self.pad < 0:
            raise ConfigError(f"conv pad must be >= 0, got {self.pad}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("conv channel counts must be >= 1")


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError(f"batchnorm epsilon must be > 0, got {self.epsilon}")
        if not 0 <= self.momentum <= 1:
            raise ConfigError(f"batchnorm momentum must be in [0,1], got {self.momentum}")
        if self.channels < 1:
            raise ConfigError("batchnorm channels must be >= 1")


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class AvgPool3d:
    kernel: int = 2
    stride: int = 2

    def __post_init__(self):
        if self.kernel < 1:
            raise ConfigError(f"pool kernel must be >= 1, got {self.kernel}")
        if self.stride < 1:
            raise ConfigError(f"pool stride must be >= 1, got {self.stride}")


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise ConfigError("dense feature counts must be >= 1")


LayerSpec = Union[Conv3d, BatchNorm, ReLU, AvgPool3d, Flatten, Dense]


@dataclass(frozen=True)
class ModelConfig:
    """Input shape, ordered layer list, and class names (index = logit index).

    `normalize` records which preprocessing normalization the model expects
    ("zscore" or "none"), so inference applies the same one as training.
    """

    input_shape: tuple[int, int, int, int]
    layers: tuple[LayerSpec, ...]
    class_names: tuple[str, ...]
    normalize: str = "zscore"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if len(self.input_shape) != 4:
            raise ConfigError(f"input_shape must be (C,D,H,W), got {self.input_shape}")
        if any(s < 1 for s in self.input_shape):
            raise ConfigError(f"input_shape extents must be positive: {self.input_shape}")
        if len(self.class_names) < 2:
            raise ConfigError("need at least two classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise ConfigError("class names must be unique")
        if self.normalize not in ("zscore", "none"):
            raise ConfigError(f"normalize must be 'zscore' or 'none', got {self.normalize!r}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def _conv_out(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def infer_shapes(config: ModelConfig) -> list[tuple[int, ...]]:
    """Output shape after each layer; raises ConfigError naming a bad layer."""
    shape: tuple[int, ...] = config.input_shape
    out: list[tuple[int, ...]] = []
    for i, spec in enumerate(config.layers):
        where = f"layer {i} ({type(spec).__name__})"
        if isinstance(spec, Conv3d):
            if len(shape) != 4 or shape[0] != spec.in_channels:
                raise ConfigError(f"{where}: expects {spec.in_channels} channels, input is {shape}")
            spat = tuple(_conv_out(s, spec.kernel, spec.stride, spec.pad) for s in shape[1:])
            if min(spat) < 1:
                raise ConfigError(f"{where}: output extent would be < 1 for input {shape}")
            shape = (spec.out_channels,) + spat
        elif isinstance(spec, BatchNorm):
            if len(shape) != 4 or shape[0] != spec.channels:
                raise ConfigError(f"{where}: expects {spec.channels} channels, input is {shape}")
        elif isinstance(spec, ReLU):
            pass
        elif isinstance(spec, AvgPool3d):
            if len(shape) != 4:
                raise ConfigError(f"{where}: needs a (C,D,H,W) input, got {shape}")
            if min(shape[1:]) < spec.kernel:
                raise ConfigError(f"{where}: kernel {spec.kernel} larger than input {shape}")
            shape = (shape[0],) + tuple((s - spec.kernel) // spec.stride + 1 for s in shape[1:])
        elif isinstance(spec, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(spec, Dense):
            if len(shape) != 1 or shape[0] != spec.in_features:
                raise ConfigError(f"{where}: expects {spec.in_features} flat features, input is {shape}")
            shape = (spec.out_features,)
        else:
            raise ConfigError(f"{where}: unknown layer kind")
        out.append(shape)
    last = config.layers[-1] if config.layers else None
    if not isinstance(last, Dense) or last.out_features != config.n_classes:
        raise ConfigError(
            f"final layer must be Dense with out_features == {config.n_classes} classes"
        )
    return out


def default_model_config(
    input_shape: tuple[int, int, int, int],
    class_names: tuple[str, ...] = ("term", "preterm"),
    channels: tuple[int, ...] = (16, 32, 64, 128),
    hidden: int = 128,
    pool_stride: int = 2,
    normalize: str = "zscore",
) -> ModelConfig:
    """Conv/BN/ReLU/AvgPool blocks followed by two dense layers.

    One block per entry in `channels`; pooling halves the spatial extents
    (stride 2 by default), so the input must be large enough for the block
    count requested.
    """
    c, *dims = input_shape
    layers: list[LayerSpec] = []
    in_ch = c
    for out_ch in channels:
        layers += [
            Conv3d(in_ch, out_ch, kernel=3, stride=1, pad=1),
            BatchNorm(out_ch),
            ReLU(),
            AvgPool3d(kernel=2, stride=pool_stride),
        ]
        dims = [(d - 2) // pool_stride + 1 for d in dims]
        if min(dims) < 1:
            raise ConfigError(f"input {input_shape} too small for {len(channels)} pooling blocks")
        in_ch = out_ch
    flat = in_ch * int(np.prod(dims))
    layers += [Flatten(), Dense(flat, hidden), ReLU(), Dense(hidden, len(class_names))]
    config = ModelConfig(tuple(input_shape), tuple(layers), tuple(class_names), normalize)
    infer_shapes(config)
    return config


# ---------------------------------------------------------------------------
# Parameters

_PARAM_NAMES = {
    Conv3d: ("weight", "bias"),
    BatchNorm: ("gamma", "beta", "running_mean", "running_var"),
    Dense: ("weight", "bias"),
}
_LEARNABLE = frozenset({"weight", "bias", "gamma", "beta"})


class ParamSet:
    """Per-layer tensors aligned with a ModelConfig's layer list.

    Each entry is a dict keyed by tensor name; layers without parameters
    hold an empty dict.  Running batch-norm statistics live here too but
    are excluded from `named_learnables`.
    """

    def __init__(self, layers: list[dict[str, Tensor]]):
        self.layers = layers

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i: int) -> dict[str, Tensor]:
        return self.layers[i]

    def named_tensors(self):
        for i, d in enumerate(self.layers):
            for name, t in d.items():
                yield f"{i}.{name}", t

    def named_learnables(self):
        for i, d in enumerate(self.layers):
            for name, t in d.items():
                if name in _LEARNABLE:
                    yield f"{i}.{name}", t

    def copy(self) -> "ParamSet":
        return ParamSet([{k: v.copy() for k, v in d.items()} for d in self.layers])

    def set(self, key: str, value: Tensor) -> None:
        idx, name = key.split(".", 1)
        self.layers[int(idx)][name] = value

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for _, t in self.named_tensors())


def init_params(config: ModelConfig, rng: np.random.Generator) -> ParamSet:
    """He-normal weights, zero biases, identity batch-norm state."""
    infer_shapes(config)
    layers: list[dict[str, Tensor]] = []
    for spec in config.layers:
        if isinstance(spec, Conv3d):
            fan_in = spec.in_channels * spec.kernel**3
            w = rng.normal(
                0.0,
                math.sqrt(2.0 / fan_in),
                size=(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel, spec.kernel),
            )
            layers.append({"weight": w, "bias": np.zeros(spec.out_channels)})
        elif isinstance(spec, BatchNorm):
            c = spec.channels
            layers.append(
                {
                    "gamma": np.ones(c),
                    "beta": np.zeros(c),
                    "running_mean": np.zeros(c),
                    "running_var": np.ones(c),
                }
            )
        elif isinstance(spec, Dense):
            w = rng.normal(0.0, math.sqrt(2.0 / spec.in_features), size=(spec.out_features, spec.in_features))
            layers.append({"weight": w, "bias": np.zeros(spec.out_features)})
        else:
            layers.append({})
    return ParamSet(layers)


def check_params(config: ModelConfig, params: ParamSet) -> None:
    """Verify parameter inventory and shapes against the config."""
    if len(params) != len(config.layers):
        raise ShapeError(f"param set has {len(params)} layers, config has {len(config.layers)}")
    for i, spec in enumerate(config.layers):
        expected = _PARAM_NAMES.get(type(spec), ())
        got = tuple(params[i].keys())
        if set(got) != set(expected):
            raise ShapeError(f"layer {i}: expected tensors {expected}, got {got}")
        if isinstance(spec, BatchNorm) and np.any(params[i]["running_var"] <= 0):
            raise StateError(f"layer {i}: running variance must be strictly positive")


# ---------------------------------------------------------------------------
# Batched kernels (leading batch axis N)


def _im2col(xp: Tensor, kernel: int, stride: int, out_dims: tuple[int, int, int]) -> Tensor:
    n, c = xp.shape[:2]
    do, ho, wo = out_dims
    k, s = kernel, stride
    cols = np.empty((n, c, k, k, k, do, ho, wo))
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                cols[:, :, kd, kh, kw] = xp[
                    :, :, kd : kd + s * do : s, kh : kh + s * ho : s, kw : kw + s * wo : s
                ]
    return cols.reshape(n, c * k**3, do * ho * wo)


def _col2im(
    dcols: Tensor, padded_shape: tuple, kernel: int, stride: int, out_dims: tuple[int, int, int]
) -> Tensor:
    n, c = padded_shape[:2]
    do, ho, wo = out_dims
    k, s = kernel, stride
    dxp = np.zeros(padded_shape)
    dc = dcols.reshape(n, c, k, k, k, do, ho, wo)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                dxp[:, :, kd : kd + s * do : s, kh : kh + s * ho : s, kw : kw + s * wo : s] += dc[
                    :, :, kd, kh, kw
                ]
    return dxp


def _pad_batch(x: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return x
    return np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)])


def _conv3d_out_dims(spatial: tuple[int, ...], kernel: int, stride: int, pad: int) -> tuple:
    dims = tuple(_conv_out(s, kernel, stride, pad) for s in spatial)
    if min(dims) < 1:
        raise ShapeError(f"convolution output extent < 1 for input {spatial}")
    return dims


def conv3d_batch(x: Tensor, w: Tensor, b: Tensor | None, stride: int, pad: int) -> Tensor:
    """Cross-correlation of (N,C,D,H,W) with (O,C,k,k,k) plus per-channel bias."""
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv expects 5-axis input and weights, got {x.ndim} and {w.ndim}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape[1]}, weights {w.shape[1]}")
    n = x.shape[0]
    o, _, k = w.shape[:3]
    out_dims = _conv3d_out_dims(x.shape[2:], k, stride, pad)
    cols = _im2col(_pad_batch(x, pad), k, stride, out_dims)
    out = np.matmul(w.reshape(o, -1), cols)
    if b is not None:
        out += b.reshape(1, o, 1)
    return out.reshape(n, o, *out_dims)


def conv3d_batch_backward(
    x: Tensor, w: Tensor, stride: int, pad: int, dout: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients (dx, dw, db) of a conv output against upstream `dout`."""
    n = x.shape[0]
    o, _, k = w.shape[:3]
    out_dims = dout.shape[2:]
    xp = _pad_batch(x, pad)
    cols = _im2col(xp, k, stride, out_dims)
    g2 = dout.reshape(n, o, -1)
    dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = g2.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(o, -1).T, g2)
    dxp = _col2im(dcols, xp.shape, k, stride, out_dims)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad, pad:-pad]
    return dxp, dw, db


def conv3d_input_grad(
    w: Tensor, s: Tensor, input_spatial: tuple[int, int, int], stride: int, pad: int
) -> Tensor:
    """Transpose of the conv linear map: distribute (N,O,...) back to input shape."""
    n = s.shape[0]
    o, c, k = w.shape[:3]
    out_dims = s.shape[2:]
    padded = tuple(d + 2 * pad for d in input_spatial)
    dcols = np.matmul(w.reshape(o, -1).T, s.reshape(n, o, -1))
    dxp = _col2im(dcols, (n, c) + padded, k, stride, out_dims)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad, pad:-pad]
    return dxp


def avgpool3d_batch(x: Tensor, kernel: int, stride: int) -> Tensor:
    if x.ndim != 5:
        raise ShapeError(f"pool expects a 5-axis input, got {x.ndim}")
    if min(x.shape[2:]) < kernel:
        raise ShapeError(f"pool kernel {kernel} larger than input {x.shape[2:]}")
    k, s = kernel, stride
    do, ho, wo = ((d - k) // s + 1 for d in x.shape[2:])
    acc = np.zeros(x.shape[:2] + (do, ho, wo))
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                acc += x[:, :, kd : kd + s * do : s, kh : kh + s * ho : s, kw : kw + s * wo : s]
    return acc / k**3


def avgpool3d_batch_backward(x_shape: tuple, kernel: int, stride: int, dout: Tensor) -> Tensor:
    k, s = kernel, stride
    do, ho, wo = dout.shape[2:]
    dx = np.zeros(x_shape)
    share = dout / k**3
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                dx[:, :, kd : kd + s * do : s, kh : kh + s * ho : s, kw : kw + s * wo : s] += share
    return dx


def _bn_view(v: Tensor) -> Tensor:
    return v.reshape(1, -1, 1, 1, 1)


def batchnorm_batch_train(
    x: Tensor, gamma: Tensor, beta: Tensor, epsilon: float
) -> tuple[Tensor, tuple[Tensor, Tensor, Tensor]]:
    """Normalize with batch statistics over (batch, spatial); returns (y, aux)."""
    axes = (0, 2, 3, 4)
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    xhat = (x - _bn_view(mean)) / _bn_view(np.sqrt(var + epsilon))
    y = _bn_view(gamma) * xhat + _bn_view(beta)
    return y, (mean, var, xhat)


def batchnorm_batch_infer(
    x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor, epsilon: float
) -> Tensor:
    if np.any(running_var <= 0):
        raise StateError("running variance must be strictly positive")
    scale = gamma / np.sqrt(running_var + epsilon)
    return _bn_view(scale) * (x - _bn_view(running_mean)) + _bn_view(beta)


def batchnorm_batch_backward(
    dout: Tensor, gamma: Tensor, epsilon: float, aux: tuple[Tensor, Tensor, Tensor]
) -> tuple[Tensor, Tensor, Tensor]:
    """Exact train-mode gradients; couples every sample in the batch."""
    _, var, xhat = aux
    axes = (0, 2, 3, 4)
    m = float(np.prod([dout.shape[a] for a in axes]))
    inv_std = 1.0 / np.sqrt(var + epsilon)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * _bn_view(gamma)
    dx = (_bn_view(inv_std) / m) * (
        m * dxhat - _bn_view(dxhat.sum(axis=axes)) - xhat * _bn_view((dxhat * xhat).sum(axis=axes))
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Single-sample operations (batch-of-one wrappers)


def conv3d_forward(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"conv input must be (C,D,H,W), got {x.ndim} axes")
    return conv3d_batch(x[None], weights, bias, stride, pad)[0]


def avgpool3d_forward(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"pool input must be (C,D,H,W), got {x.ndim} axes")
    return avgpool3d_batch(x[None], kernel, stride)[0]


def batchnorm_forward(
    x: Tensor, params: dict[str, Tensor], mode: str = "infer", epsilon: float = 1e-5
):
    """Per-channel normalization; returns (out, batch_stats) with stats only in train mode."""
    if x.ndim != 4 or x.shape[0] != params["gamma"].shape[0]:
        raise ShapeError(f"batchnorm channel mismatch for input {x.shape}")
    if mode == "train":
        y, (mean, var, _) = batchnorm_batch_train(x[None], params["gamma"], params["beta"], epsilon)
        return y[0], (mean, var)
    y = batchnorm_batch_infer(
        x[None], params["gamma"], params["beta"], params["running_mean"], params["running_var"], epsilon
    )
    return y[0], None


def dense_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 1 or weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ShapeError(f"dense expects x (F,), weights (O,F); got {x.shape} and {weights.shape}")
    return weights @ x + bias


def softmax(logits: Tensor) -> Tensor:
    """Stable softmax of a 1-D logit vector."""
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ShapeError(f"softmax expects a 1-D vector of >= 2 logits, got {logits.shape}")
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _softmax_rows(logits: Tensor) -> Tensor:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Whole-model forward / backward


@dataclass
class LayerCache:
    """Input and output activations of one layer (leading batch axis)."""

    x: Tensor
    y: Tensor
    aux: tuple | None = None


class ForwardCache:
    """One entry per layer, retained for gradients and relevance propagation."""

    def __init__(self, mode: str, n_layers: int):
        self.mode = mode
        self.entries: list[LayerCache] = []
        self._n_layers = n_layers

    def append(self, entry: LayerCache) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> LayerCache:
        return self.entries[i]


@dataclass
class BatchResult:
    logits: Tensor
    probs: Tensor
    cache: ForwardCache
    bn_updates: dict[int, tuple[Tensor, Tensor]] = field(default_factory=dict)


def forward_batch(config: ModelConfig, params: ParamSet, x: Tensor, mode: str = "infer") -> BatchResult:
    """Run a (N,C,D,H,W) batch through the network, caching every layer.

    Train mode normalizes with the batch's own statistics and reports the
    momentum-updated running stats in `bn_updates`; it never mutates
    `params`, so the forward map stays a pure function of its arguments.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    if x.ndim != 5 or x.shape[1:] != config.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match input {config.input_shape}")
    check_params(config, params)
    cache = ForwardCache(mode, len(config.layers))
    bn_updates: dict[int, tuple[Tensor, Tensor]] = {}
    a = x
    for i, spec in enumerate(config.layers):
        p = params[i]
        aux = None
        if isinstance(spec, Conv3d):
            y = conv3d_batch(a, p["weight"], p["bias"], spec.stride, spec.pad)
        elif isinstance(spec, BatchNorm):
            if mode == "train":
                y, aux = batchnorm_batch_train(a, p["gamma"], p["beta"], spec.epsilon)
                mean, var, _ = aux
                mom = spec.momentum
                bn_updates[i] = (
                    (1 - mom) * p["running_mean"] + mom * mean,
                    (1 - mom) * p["running_var"] + mom * var,
                )
            else:
                y = batchnorm_batch_infer(
                    a, p["gamma"], p["beta"], p["running_mean"], p["running_var"], spec.epsilon
                )
        elif isinstance(spec, ReLU):
            y = np.maximum(a, 0.0)
        elif isinstance(spec, AvgPool3d):
            y = avgpool3d_batch(a, spec.kernel, spec.stride)
        elif isinstance(spec, Flatten):
            y = a.reshape(a.shape[0], -1)
        else:  # Dense
            y = a @ p["weight"].T + p["bias"]
        cache.append(LayerCache(a, y, aux))
        a = y
    require_finite(a, "model logits")
    return BatchResult(a, _softmax_rows(a), cache, bn_updates)


def apply_bn_updates(params: ParamSet, bn_updates: dict[int, tuple[Tensor, Tensor]]) -> None:
    for i, (rm, rv) in bn_updates.items():
        params[i]["running_mean"] = rm
        params[i]["running_var"] = rv


def backward_batch(
    config: ModelConfig, params: ParamSet, cache: ForwardCache, grad_logits: Tensor
) -> tuple[list[dict[str, Tensor]], Tensor]:
    """Reverse-mode gradients of sum_i loss_i given d loss / d logits rows.

    Returns per-layer gradient dicts (same keys as the learnables) and the
    gradient at the model input.
    """
    if cache.mode != "train":
        raise StateError("backward requires a cache from a train-mode forward pass")
    if len(cache) != len(config.layers):
        raise StateError(
            f"cache has {len(cache)} entries for a {len(config.layers)}-layer model"
        )
    if grad_logits.shape != cache[-1].y.shape:
        raise StateError(
            f"grad_logits shape {grad_logits.shape} does not match logits {cache[-1].y.shape}"
        )
    grads: list[dict[str, Tensor]] = [dict() for _ in config.layers]
    g = grad_logits
    for i in reversed(range(len(config.layers))):
        spec, entry = config.layers[i], cache[i]
        if isinstance(spec, Conv3d):
            g, dw, db = conv3d_batch_backward(entry.x, params[i]["weight"], spec.stride, spec.pad, g)
            grads[i] = {"weight": dw, "bias": db}
        elif isinstance(spec, BatchNorm):
            g, dgamma, dbeta = batchnorm_batch_backward(g, params[i]["gamma"], spec.epsilon, entry.aux)
            grads[i] = {"gamma": dgamma, "beta": dbeta}
        elif isinstance(spec, ReLU):
            g = g * (entry.x > 0)
        elif isinstance(spec, AvgPool3d):
            g = avgpool3d_batch_backward(entry.x.shape, spec.kernel, spec.stride, g)
        elif isinstance(spec, Flatten):
            g = g.reshape(entry.x.shape)
        else:  # Dense
            grads[i] = {"weight": g.T @ entry.x, "bias": g.sum(axis=0)}
            g = g @ params[i]["weight"]
    return grads, g


def model_forward(
    config: ModelConfig, params: ParamSet, x: Tensor, mode: str = "infer"
) -> tuple[Tensor, Tensor, ForwardCache]:
    """Forward one volume; returns (logits, probabilities, cache)."""
    if x.ndim != 4 or x.shape != config.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match config {config.input_shape}")
    res = forward_batch(config, params, x[None], mode)
    return res.logits[0], res.probs[0], res.cache


def model_backward(
    config: ModelConfig, params: ParamSet, cache: ForwardCache, grad_logits: Tensor
) -> tuple[list[dict[str, Tensor]], Tensor]:
    """Single-sample gradients; `cache` must come from a train-mode forward."""
    if grad_logits.ndim != 1:
        raise ShapeError("grad_logits must be a 1-D vector for single-sample backward")
    grads, dx = backward_batch(config, params, cache, grad_logits[None])
    return grads, dx[0]


# ---------------------------------------------------------------------------
# Model config text format
#
# Line-oriented `key = value` file.  `input` is CxDxHxW, `classes` is a
# comma-separated ordered list, and each `layer` line is a kind followed
# by key=value attributes.  Layer order in the file is the network order.

_LAYER_KINDS = {
    "conv3d": Conv3d,
    "batchnorm": BatchNorm,
    "relu": ReLU,
    "avgpool3d": AvgPool3d,
    "flatten": Flatten,
    "dense": Dense,
}

_LAYER_ATTRS = {
    Conv3d: (("in", "in_channels", int), ("out", "out_channels", int), ("kernel", "kernel", int),
             ("stride", "stride", int), ("pad", "pad", int)),
    BatchNorm: (("channels", "channels", int), ("epsilon", "epsilon", float),
                ("momentum", "momentum", float)),
    ReLU: (),
    AvgPool3d: (("kernel", "kernel", int), ("stride", "stride", int)),
    Flatten: (),
    Dense: (("in", "in_features", int), ("out", "out_features", int)),
}


def format_model_config(config: ModelConfig) -> str:
    lines = ["# voxlrp model definition v1"]
    lines.append("input = " + "x".join(str(s) for s in config.input_shape))
    lines.append("classes = " + ",".join(config.class_names))
    lines.append("normalize = " + config.normalize)
    for spec in config.layers:
        kind = next(k for k, cls in _LAYER_KINDS.items() if cls is type(spec))
        attrs = " ".join(
            f"{key}={_format_value(getattr(spec, attr))}" for key, attr, _ in _LAYER_ATTRS[type(spec)]
        )
        lines.append(("layer = " + kind + (" " + attrs if attrs else "")))
    return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def parse_model_config(text: str) -> ModelConfig:
    input_shape = None
    class_names = None
    normalize = "zscore"
    layers: list[LayerSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "input":
            try:
                input_shape = tuple(int(s) for s in value.split("x"))
            except ValueError:
                raise ConfigError(f"line {lineno}: bad input shape {value!r}") from None
        elif key == "classes":
            class_names = tuple(s.strip() for s in value.split(",") if s.strip())
        elif key == "normalize":
            normalize = value
        elif key == "layer":
            layers.append(_parse_layer(value, lineno))
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    if input_shape is None:
        raise ConfigError("missing 'input' line")
    if class_names is None:
        raise ConfigError("missing 'classes' line")
    if len(input_shape) != 4:
        raise ConfigError(f"input shape must have 4 extents, got {input_shape}")
    config = ModelConfig(input_shape, tuple(layers), class_names, normalize)
    infer_shapes(config)
    return config


def _parse_layer(value: str, lineno: int) -> LayerSpec:
    parts = value.split()
    kind = parts[0].lower()
    if kind not in _LAYER_KINDS:
        raise ConfigError(f"line {lineno}: unknown layer kind {kind!r}")
    cls = _LAYER_KINDS[kind]
    allowed = {key: (attr, conv) for key, attr, conv in _LAYER_ATTRS[cls]}
    kwargs = {}
    for part in parts[1:]:
        if "=" not in part:
            raise ConfigError(f"line {lineno}: expected key=value, got {part!r}")
        key, _, v = part.partition("=")
        if key not in allowed:
            raise ConfigError(f"line {lineno}: {kind} has no attribute {key!r}")
        attr, conv = allowed[key]
        try:
            kwargs[attr] = conv(v)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {v!r} for {key}") from None
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"line {lineno}: {exc}") from None
