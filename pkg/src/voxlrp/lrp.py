"""Relevance propagation through the network with alpha-beta rules.

The classifier's pre-softmax score for one class is redistributed backwards
layer by layer until every input voxel holds a relevance value.  Positive
and negative contributions are weighted by alpha and beta (alpha - beta = 1,
beta >= 0), denominators are stabilized by a sign-preserving epsilon, and
batch normalization is folded into the preceding linear layer first so the
rule set only has to cover linear maps, pooling, and pointwise layers.

Bias handling: the signed denominators always contain the bias parts of the
pre-activation.  Under the default `exclude` policy the bias share of each
output's relevance is dropped (an audited leak); under `include` it is
spread uniformly over the contributing inputs, which conserves the layer
sum exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .layers import (
    AvgPool3d,
    BatchNorm,
    Conv3d,
    Dense,
    Flatten,
    ModelConfig,
    ParamSet,
    ReLU,
    avgpool3d_batch,
    avgpool3d_batch_backward,
    conv3d_batch,
    conv3d_input_grad,
    model_forward,
)
from .tensor import Tensor

# ---------------------------------------------------------------------------
# Configuration and result types


@dataclass(frozen=True)
class LrpConfig:
    """Rule parameters; construction enforces alpha - beta = 1 and beta >= 0."""

    alpha: float = 2.0
    beta: float = 1.0
    epsilon_stabilizer: float = 1e-9
    input_rule: str = "alphabeta"  # or "zb" with input_bounds set
    input_bounds: tuple[float, float] | None = None
    bias_policy: str = "exclude"

    def __post_init__(self):
        if abs((self.alpha - self.beta) - 1.0) > 1e-9:
            raise ConfigError(f"need alpha - beta = 1, got alpha={self.alpha}, beta={self.beta}")
        if self.beta < 0:
            raise ConfigError(f"need beta >= 0, got {self.beta}")
        if self.epsilon_stabilizer <= 0:
            raise ConfigError("epsilon_stabilizer must be > 0")
        if self.input_rule not in ("alphabeta", "zb"):
            raise ConfigError(f"unknown input rule {self.input_rule!r}")
        if self.input_rule == "zb":
            if self.input_bounds is None:
                raise ConfigError("zb input rule needs input_bounds=(low, high)")
            low, high = self.input_bounds
            if not low < high:
                raise ConfigError(f"input_bounds must satisfy low < high, got {self.input_bounds}")
            object.__setattr__(self, "input_bounds", (float(low), float(high)))
        if self.bias_policy not in ("exclude", "include"):
            raise ConfigError(f"unknown bias_policy {self.bias_policy!r}")


@dataclass
class RelevanceMap:
    """Input-shaped relevance plus provenance and the per-layer audit trail."""

    relevance: Tensor  # shaped like the model input (C,D,H,W)
    target_class: int
    config: LrpConfig
    subject_id: str
    layer_sums: tuple[tuple[str, float], ...]  # ("output", .) first, input layer last
    target_logit: float
    notes: tuple[str, ...] = ()


@dataclass
class BoundaryLeak:
    boundary: str
    leak: float


@dataclass
class AuditReport:
    boundaries: list[BoundaryLeak]
    total_leak: float
    total_leak_relative: float


# ---------------------------------------------------------------------------
# Batch-norm folding


def fold_batchnorm(config: ModelConfig, params: ParamSet) -> tuple[ModelConfig, ParamSet]:
    """Absorb every BatchNorm into its preceding Conv3d or Dense layer.

    The folded model's inference-mode outputs match the original's exactly
    up to floating-point rounding.
    """
    new_layers = []
    new_params: list[dict[str, Tensor]] = []
    for i, spec in enumerate(config.layers):
        if isinstance(spec, BatchNorm):
            if not new_layers or not isinstance(new_layers[-1], (Conv3d, Dense)):
                raise ConfigError(
                    f"layer {i}: BatchNorm must directly follow Conv3d or Dense to fold"
                )
            p = params[i]
            scale = p["gamma"] / np.sqrt(p["running_var"] + spec.epsilon)
            prev = new_params[-1]
            w, b = prev["weight"], prev["bias"]
            shape = (-1,) + (1,) * (w.ndim - 1)
            new_params[-1] = {
                "weight": w * scale.reshape(shape),
                "bias": (b - p["running_mean"]) * scale + p["beta"],
            }
        else:
            new_layers.append(spec)
            new_params.append({k: v.copy() for k, v in params[i].items()})
    folded = ModelConfig(config.input_shape, tuple(new_layers), config.class_names)
    return folded, ParamSet(new_params)


# ---------------------------------------------------------------------------
# Per-layer rules


def init_relevance(logits: Tensor, target_class: int) -> Tensor:
    """One-hot mask of the pre-softmax logits: only the target keeps its score."""
    if not 0 <= target_class < logits.shape[0]:
        raise ShapeError(f"target class {target_class} out of range for {logits.shape[0]} logits")
    r = np.zeros_like(logits)
    r[target_class] = logits[target_class]
    return r


def _signed_bias(b: Tensor | None, like: Tensor) -> tuple[Tensor, Tensor]:
    if b is None:
        z = np.zeros(like.shape[0])
        return z, z
    return np.maximum(b, 0.0), np.minimum(b, 0.0)


def _side_coefficients(denp: Tensor, denn: Tensor, cfg: LrpConfig) -> tuple[Tensor, Tensor]:
    """Per-unit weights for the positive and negative contribution shares.

    With carriers on both sides the split is (alpha, -beta), which conserves
    because alpha - beta = 1.  A unit whose negative (or positive) side is
    empty routes its whole relevance through the other side with weight 1;
    with neither side present the relevance has nowhere to go and leaks.
    """
    pos = denp > 0
    neg = denn < 0
    cp = np.where(neg, cfg.alpha, np.where(pos, 1.0, 0.0))
    cn = np.where(pos, -cfg.beta, np.where(neg, 1.0, 0.0))
    return cp, cn


def lrp_linear(a: Tensor, w: Tensor, b: Tensor | None, r: Tensor, cfg: LrpConfig) -> Tensor:
    """Alpha-beta redistribution through y = W a + b with W of shape (O, F)."""
    if a.ndim != 1 or w.ndim != 2 or w.shape[1] != a.shape[0] or r.shape != (w.shape[0],):
        raise ShapeError(f"lrp_linear shapes: a {a.shape}, w {w.shape}, r {r.shape}")
    eps = cfg.epsilon_stabilizer
    z = w * a[None, :]
    zp, zn = np.maximum(z, 0.0), np.minimum(z, 0.0)
    bp, bn = _signed_bias(b, w)
    denp = zp.sum(axis=1) + bp
    denn = zn.sum(axis=1) + bn
    cp, cn = _side_coefficients(denp, denn, cfg)
    sp = cp * r / (denp + eps)
    sn = cn * r / (denn - eps)
    rel = zp.T @ sp + zn.T @ sn
    if cfg.bias_policy == "include":
        t = (cp * bp / (denp + eps) + cn * bn / (denn - eps)) * r
        rel = rel + t.sum() / a.shape[0]
    return rel


def _zb_linear(a: Tensor, w: Tensor, r: Tensor, cfg: LrpConfig) -> Tensor:
    low, high = cfg.input_bounds
    eps = cfg.epsilon_stabilizer
    wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
    den = w @ a - low * wp.sum(axis=1) - high * wn.sum(axis=1)
    den = den + np.where(den >= 0, eps, -eps)
    s = r / den
    return a * (w.T @ s) - low * (wp.T @ s) - high * (wn.T @ s)


def lrp_conv3d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None,
    r: Tensor,
    stride: int,
    pad: int,
    cfg: LrpConfig,
) -> Tensor:
    """Alpha-beta rule over the convolution's implicit linear map.

    Equivalent to `lrp_linear` applied to the unrolled (im2col) matrix but
    computed with four convolutions and four transposed convolutions.
    """
    if x.ndim != 4 or w.ndim != 5 or r.ndim != 4:
        raise ShapeError(f"lrp_conv3d shapes: x {x.shape}, w {w.shape}, r {r.shape}")
    eps = cfg.epsilon_stabilizer
    xb = x[None]
    rb = r[None]
    xpos, xneg = np.maximum(xb, 0.0), np.minimum(xb, 0.0)
    wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
    denp = conv3d_batch(xpos, wp, None, stride, pad) + conv3d_batch(xneg, wn, None, stride, pad)
    denn = conv3d_batch(xpos, wn, None, stride, pad) + conv3d_batch(xneg, wp, None, stride, pad)
    bp, bn = _signed_bias(b, w)
    view = (1, -1, 1, 1, 1)
    denp = denp + bp.reshape(view)
    denn = denn + bn.reshape(view)
    cp, cn = _side_coefficients(denp, denn, cfg)
    sp = cp * rb / (denp + eps)
    sn = cn * rb / (denn - eps)
    spatial = x.shape[1:]
    rel = xpos * (
        conv3d_input_grad(wp, sp, spatial, stride, pad)
        + conv3d_input_grad(wn, sn, spatial, stride, pad)
    ) + xneg * (
        conv3d_input_grad(wn, sp, spatial, stride, pad)
        + conv3d_input_grad(wp, sn, spatial, stride, pad)
    )
    if cfg.bias_policy == "include" and b is not None and np.any(b != 0):
        ones_in = np.ones_like(xb)
        ones_w = np.ones((1,) + w.shape[1:])
        counts = conv3d_batch(ones_in, ones_w, None, stride, pad)
        t = (cp * bp.reshape(view) / (denp + eps) + cn * bn.reshape(view) / (denn - eps))
        t = t * rb / counts
        rel = rel + conv3d_input_grad(np.ones_like(w), t, spatial, stride, pad)
    return rel[0]


def _zb_conv3d(x: Tensor, w: Tensor, r: Tensor, stride: int, pad: int, cfg: LrpConfig) -> Tensor:
    low, high = cfg.input_bounds
    eps = cfg.epsilon_stabilizer
    xb, rb = x[None], r[None]
    wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
    lo = np.full_like(xb, low)
    hi = np.full_like(xb, high)
    den = (
        conv3d_batch(xb, w, None, stride, pad)
        - conv3d_batch(lo, wp, None, stride, pad)
        - conv3d_batch(hi, wn, None, stride, pad)
    )
    den = den + np.where(den >= 0, eps, -eps)
    s = rb / den
    spatial = x.shape[1:]
    rel = (
        xb * conv3d_input_grad(w, s, spatial, stride, pad)
        - lo * conv3d_input_grad(wp, s, spatial, stride, pad)
        - hi * conv3d_input_grad(wn, s, spatial, stride, pad)
    )
    return rel[0]


def lrp_avgpool(x: Tensor, r: Tensor, kernel: int, stride: int) -> Tensor:
    """Proportional redistribution over each pooling window.

    Each input position receives a_j / sum(window) of the window's relevance;
    overlapping windows accumulate.  A window whose activations sum to zero
    routes its relevance in equal shares instead, which keeps the layer sum
    exact.
    """
    rel, _ = _lrp_avgpool(x, r, kernel, stride)
    return rel


def _lrp_avgpool(x: Tensor, r: Tensor, kernel: int, stride: int) -> tuple[Tensor, float]:
    if x.ndim != 4 or r.ndim != 4:
        raise ShapeError(f"lrp_avgpool shapes: x {x.shape}, r {r.shape}")
    xb, rb = x[None], r[None]
    k3 = kernel**3
    winsum = avgpool3d_batch(xb, kernel, stride) * k3
    zero = winsum == 0
    shares = np.where(zero, 0.0, rb / np.where(zero, 1.0, winsum))
    rel = xb * avgpool3d_batch_backward(xb.shape, kernel, stride, shares * k3)
    routed_equal = 0.0
    if np.any(zero & (rb != 0)):
        equal = np.where(zero, rb, 0.0)
        rel = rel + avgpool3d_batch_backward(xb.shape, kernel, stride, equal)
        routed_equal = float(np.abs(equal).sum())
    return rel[0], routed_equal


def lrp_relu(r: Tensor) -> Tensor:
    """Relevance passes through the nonlinearity unchanged."""
    return r


def lrp_flatten(r: Tensor, input_shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(input_shape)) != r.size:
        raise ShapeError(f"cannot reshape {r.size} relevances to {input_shape}")
    return r.reshape(input_shape)


# ---------------------------------------------------------------------------
# Whole-model explanation


def explain(
    config: ModelConfig,
    params: ParamSet,
    x: Tensor,
    target_class: int,
    cfg: LrpConfig,
    subject_id: str = "",
) -> RelevanceMap:
    """Relevance map of one input for one target class.

    Folds batch norm, runs an inference-mode forward pass, seeds relevance
    from the target's pre-softmax logit, and applies the rule chain in
    reverse, recording the relevance sum after every layer.
    """
    if not params.all_finite():
        raise StateError("parameters contain non-finite values; train or load a model first")
    folded_cfg, folded_params = fold_batchnorm(config, params)
    logits, _, cache = model_forward(folded_cfg, folded_params, x, mode="infer")
    if not 0 <= target_class < logits.shape[0]:
        raise ShapeError(f"target class {target_class} out of range")
    first_linear = next(
        i for i, spec in enumerate(folded_cfg.layers) if isinstance(spec, (Conv3d, Dense))
    )
    r: Tensor = init_relevance(logits, target_class)
    sums = [("output", float(r.sum()))]
    notes: list[str] = []
    for i in reversed(range(len(folded_cfg.layers))):
        spec = folded_cfg.layers[i]
        a = cache[i].x[0]
        p = folded_params[i]
        use_zb = cfg.input_rule == "zb" and i == first_linear
        if isinstance(spec, Dense):
            if use_zb:
                r = _zb_linear(a, p["weight"], r, cfg)
            else:
                r = lrp_linear(a, p["weight"], p["bias"], r, cfg)
        elif isinstance(spec, Conv3d):
            if use_zb:
                r = _zb_conv3d(a, p["weight"], r, spec.stride, spec.pad, cfg)
            else:
                r = lrp_conv3d(a, p["weight"], p["bias"], r, spec.stride, spec.pad, cfg)
        elif isinstance(spec, AvgPool3d):
            r, routed = _lrp_avgpool(a, r, spec.kernel, spec.stride)
            if routed:
                notes.append(f"layer {i}: {routed:.3e} relevance routed equally in zero windows")
        elif isinstance(spec, ReLU):
            r = lrp_relu(r)
        elif isinstance(spec, Flatten):
            r = lrp_flatten(r, a.shape)
        else:
            raise ConfigError(f"layer {i} ({type(spec).__name__}) has no relevance rule")
        sums.append((f"{i}.{type(spec).__name__.lower()}", float(r.sum())))
    return RelevanceMap(
        relevance=r,
        target_class=target_class,
        config=cfg,
        subject_id=subject_id,
        layer_sums=tuple(sums),
        target_logit=float(logits[target_class]),
        notes=tuple(notes),
    )


def conservation_audit(rmap: RelevanceMap) -> AuditReport:
    """Per-boundary relevance leaks and the total against the target logit."""
    if len(rmap.layer_sums) < 2:
        raise StateError("relevance map has no audit trail")
    boundaries = []
    for (from_label, s_from), (to_label, s_to) in zip(rmap.layer_sums, rmap.layer_sums[1:]):
        boundaries.append(BoundaryLeak(f"{from_label}->{to_label}", abs(s_from - s_to)))
    total = abs(rmap.layer_sums[-1][1] - rmap.target_logit)
    rel = total / max(abs(rmap.target_logit), 1e-12)
    return AuditReport(boundaries, total, rel)


def aggregate_group(maps: list[RelevanceMap], group_labels: list[str]) -> dict[str, Tensor]:
    """Voxelwise mean relevance per group; empty groups are simply absent.

    All maps must share one shape and one rule configuration.  The caller is
    responsible for filtering to correctly classified subjects.
    """
    if len(maps) != len(group_labels):
        raise ShapeError(f"{len(maps)} maps but {len(group_labels)} group labels")
    if not maps:
        return {}
    shape = maps[0].relevance.shape
    cfg = maps[0].config
    for m in maps:
        if m.relevance.shape != shape:
            raise ShapeError(f"map shapes differ: {m.relevance.shape} vs {shape}")
        if m.config != cfg:
            raise ConfigError("maps were produced with different rule configurations")
    groups: dict[str, list[RelevanceMap]] = {}
    for m, g in zip(maps, group_labels):
        groups.setdefault(g, []).append(m)
    out = {}
    for g, members in groups.items():
        members = sorted(members, key=lambda m: m.subject_id)
        acc = np.zeros(shape)
        for m in members:
            acc += m.relevance
        out[g] = acc / len(members)
    return out
