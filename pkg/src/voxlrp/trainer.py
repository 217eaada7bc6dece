"""Loss, optimizer, learning-rate schedule, data splitting, and training.

Training minimizes a class-weighted categorical cross entropy with Adam,
the learning rate following a cyclical triangular schedule between a base
and a maximum value (the decaying `triangular2` variant halves the
amplitude every cycle).  Splits and fold assignments are stratified and
fully determined by their seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers
from .errors import ConfigError, ShapeError, TrainingDiverged
from .layers import ForwardCache, ModelConfig, ParamSet
from .tensor import Tensor

# ---------------------------------------------------------------------------
# Data containers


@dataclass
class Sample:
    volume: Tensor  # (C, D, H, W), preprocessed
    label: int
    subject_id: str


@dataclass
class Dataset:
    """Labeled volumes plus optional ground-truth discriminative masks."""

    samples: list[Sample]
    class_names: tuple[str, ...]
    gt_masks: dict[str, Tensor] | None = None

    def __post_init__(self):
        k = len(self.class_names)
        for s in self.samples:
            if not 0 <= s.label < k:
                raise ConfigError(f"label {s.label} out of range for {k} classes")
        shapes = {s.volume.shape for s in self.samples}
        if len(shapes) > 1:
            raise ShapeError(f"volumes must share one shape, got {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.class_names, self.gt_masks)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 24
    batch_size: int = 4
    base_lr: float = 1e-5
    max_lr: float = 1e-3
    cycle_step_size: int | None = None  # iterations; None = 4 epochs' worth
    lr_policy: str = "triangular2"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    class_weight_mode: str = "inverse_frequency"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.base_lr <= self.max_lr:
            raise ConfigError(f"need 0 <= base_lr <= max_lr, got {self.base_lr}, {self.max_lr}")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0 < b < 1:
                raise ConfigError(f"Adam betas must be in (0,1), got {b}")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be > 0")
        if self.lr_policy not in ("triangular", "triangular2"):
            raise ConfigError(f"unknown lr_policy {self.lr_policy!r}")
        if self.class_weight_mode not in ("none", "inverse_frequency"):
            raise ConfigError(f"unknown class_weight_mode {self.class_weight_mode!r}")
        if self.cycle_step_size is not None and self.cycle_step_size < 1:
            raise ConfigError("cycle_step_size must be >= 1")


class AdamState:
    """First/second moment accumulators per learnable tensor, plus timestep."""

    def __init__(self, params: ParamSet):
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in params.named_learnables()}
        self.v = {name: np.zeros_like(p) for name, p in params.named_learnables()}


@dataclass
class PredictionRecord:
    subject_id: str
    label: int | None
    predicted: int
    probs: Tensor


@dataclass
class Metrics:
    accuracy: float
    true_positive_rate: float | None
    true_negative_rate: float | None
    confusion: np.ndarray  # (K, K), rows = true, cols = predicted
    predictions: list[PredictionRecord]
    positive_class: str


@dataclass
class IterationRecord:
    iteration: int
    lr: float
    loss: float


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    val_accuracy: float | None


@dataclass
class TrainHistory:
    iterations: list[IterationRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    clamped_probs: int = 0
    best_val_accuracy: float | None = None


# ---------------------------------------------------------------------------
# Loss and schedule


def class_weights(labels, n_classes: int, mode: str = "inverse_frequency") -> np.ndarray:
    """Per-class loss weights: w_c = N / (K * N_c), or all ones."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        empty = int(np.argmin(counts))
        raise ConfigError(f"class {empty} has no samples")
    if mode == "none":
        return np.ones(n_classes)
    if mode != "inverse_frequency":
        raise ConfigError(f"unknown class_weight_mode {mode!r}")
    return len(labels) / (n_classes * counts.astype(np.float64))


_PROB_FLOOR = 1e-12


def weighted_cross_entropy(probs: Tensor, label: int, weights) -> tuple[float, Tensor]:
    """Loss -w_y * ln(p_y) and its gradient at the logits, w_y * (p - onehot)."""
    loss, grad, _ = _weighted_cross_entropy(probs, label, weights)
    return loss, grad


def _weighted_cross_entropy(probs: Tensor, label: int, weights) -> tuple[float, Tensor, bool]:
    if not 0 <= label < probs.shape[0]:
        raise ShapeError(f"label {label} out of range for {probs.shape[0]} classes")
    w = float(np.asarray(weights)[label])
    p = float(probs[label])
    clamped = p < _PROB_FLOOR
    loss = -w * math.log(max(p, _PROB_FLOOR))
    grad = w * probs.copy()
    grad[label] -= w
    return loss, grad, clamped


def cyclical_lr(iteration: int, tc: TrainConfig, step_size: int | None = None) -> float:
    """Triangular cyclical learning rate; `triangular2` halves the peak per cycle."""
    if iteration < 0:
        raise ConfigError(f"iteration must be >= 0, got {iteration}")
    step = step_size if step_size is not None else tc.cycle_step_size
    if step is None or step < 1:
        raise ConfigError("cycle step size not resolved")
    cycle = math.floor(1 + iteration / (2 * step))
    x = abs(iteration / step - 2 * cycle + 1)
    scale = 1.0 if tc.lr_policy == "triangular" else 1.0 / 2 ** (cycle - 1)
    return tc.base_lr + (tc.max_lr - tc.base_lr) * max(0.0, 1.0 - x) * scale


def adam_step(
    params: ParamSet, grads: list[dict[str, Tensor]], state: AdamState, lr: float, tc: TrainConfig
) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update, applied in place to the learnables."""
    state.t += 1
    b1, b2 = tc.adam_beta1, tc.adam_beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, layer_grads in enumerate(grads):
        for name, g in layer_grads.items():
            key = f"{i}.{name}"
            m = state.m[key] = b1 * state.m[key] + (1 - b1) * g
            v = state.v[key] = b2 * state.v[key] + (1 - b2) * g * g
            params[i][name] = params[i][name] - lr * (m / c1) / (np.sqrt(v / c2) + tc.adam_eps)
    return params, state


# ---------------------------------------------------------------------------
# Splits


def _per_class_indices(labels: np.ndarray, rng: np.random.Generator) -> dict[int, np.ndarray]:
    out = {}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        out[int(c)] = rng.permutation(idx)
    return out


def stratified_split(
    labels, test_fraction: float = 0.1, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, exhaustive train/test indices with per-class ratios kept to +-1.

    Per-class test counts start at floor(n_c * fraction); leftover slots are
    dealt round-robin in order of descending fractional remainder.
    """
    labels = np.asarray(labels)
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction must be in (0,1), got {test_fraction}")
    counts = np.bincount(labels)
    if np.any(counts < 2):
        raise ConfigError("every class needs at least 2 samples to split")
    total_test = int(round(test_fraction * len(labels)))
    total_test = min(max(total_test, 1), len(labels) - 1)
    rng = np.random.default_rng(seed)
    per_class = _per_class_indices(labels, rng)
    classes = sorted(per_class)
    base = {c: int(math.floor(len(per_class[c]) * test_fraction)) for c in classes}
    remainder = total_test - sum(base.values())
    frac_order = sorted(
        classes, key=lambda c: (-(len(per_class[c]) * test_fraction - base[c]), c)
    )
    i = 0
    while remainder > 0:
        c = frac_order[i % len(frac_order)]
        if base[c] < len(per_class[c]) - 1:  # keep at least one training sample per class
            base[c] += 1
            remainder -= 1
        i += 1
        if i > 10 * len(frac_order) + len(labels):
            raise ConfigError("cannot satisfy test_fraction with these class counts")
    test, train = [], []
    for c in classes:
        idx = per_class[c]
        test.extend(idx[: base[c]])
        train.extend(idx[base[c] :])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def kfold(labels, k: int = 10, seed: int = 0) -> list[np.ndarray]:
    """k disjoint stratified validation folds covering all indices."""
    labels = np.asarray(labels)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > len(labels):
        raise ConfigError(f"k={k} exceeds {len(labels)} samples")
    rng = np.random.default_rng(seed)
    per_class = _per_class_indices(labels, rng)
    folds: list[list[int]] = [[] for _ in range(k)]
    slot = 0
    for c in sorted(per_class):
        for idx in per_class[c]:
            folds[slot % k].append(int(idx))
            slot += 1
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


# ---------------------------------------------------------------------------
# Training loop


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def train(
    config: ModelConfig,
    data: Dataset,
    tc: TrainConfig,
    val_data: Dataset | None = None,
) -> tuple[ParamSet, TrainHistory]:
    """Train from a fresh seeded initialization; deterministic given `tc.seed`.

    When `val_data` is given, validation accuracy is recorded per epoch and
    the best-validation parameters are the ones returned (ties keep the
    earlier epoch).  Aborts with TrainingDiverged if the loss goes non-finite.
    """
    if len(data) == 0:
        raise ConfigError("training dataset is empty")
    if data.samples[0].volume.shape != config.input_shape:
        raise ShapeError(
            f"dataset volumes {data.samples[0].volume.shape} do not match "
            f"model input {config.input_shape}"
        )
    labels = data.labels()
    weights = class_weights(labels, config.n_classes, tc.class_weight_mode)
    steps_per_epoch = math.ceil(len(data) / tc.batch_size)
    step_size = tc.cycle_step_size if tc.cycle_step_size is not None else 4 * steps_per_epoch

    rng = np.random.default_rng(tc.seed)
    params = layers.init_params(config, rng)
    state = AdamState(params)
    history = TrainHistory()
    best_params = None
    iteration = 0

    for epoch in range(tc.epochs):
        order = rng.permutation(len(data))
        epoch_losses = []
        for batch_idx in _batches(order, tc.batch_size):
            lr = cyclical_lr(iteration, tc, step_size)
            x = np.stack([data.samples[i].volume for i in batch_idx])
            res = layers.forward_batch(config, params, x, mode="train")
            n = len(batch_idx)
            grad_logits = np.zeros_like(res.logits)
            batch_loss = 0.0
            for row, i in enumerate(batch_idx):
                loss, grad, clamped = _weighted_cross_entropy(
                    res.probs[row], data.samples[i].label, weights
                )
                history.clamped_probs += clamped
                batch_loss += loss / n
                grad_logits[row] = grad / n
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss at iteration {iteration} (epoch {epoch}, lr {lr:g})"
                )
            grads, _ = layers.backward_batch(config, params, res.cache, grad_logits)
            layers.apply_bn_updates(params, res.bn_updates)
            adam_step(params, grads, state, lr, tc)
            history.iterations.append(IterationRecord(iteration, lr, batch_loss))
            epoch_losses.append(batch_loss)
            iteration += 1
        val_acc = None
        if val_data is not None and len(val_data) > 0:
            val_acc = evaluate(config, params, val_data).accuracy
            if history.best_val_accuracy is None or val_acc > history.best_val_accuracy:
                history.best_val_accuracy = val_acc
                best_params = params.copy()
        history.epochs.append(EpochRecord(epoch, float(np.mean(epoch_losses)), val_acc))
    return (best_params if best_params is not None else params), history


def predict_probs(config: ModelConfig, params: ParamSet, volumes, batch_size: int = 8):
    """Inference-mode probabilities for a list of (C,D,H,W) volumes, in order."""
    probs = np.zeros((len(volumes), config.n_classes))
    for start in range(0, len(volumes), batch_size):
        x = np.stack(volumes[start : start + batch_size])
        res = layers.forward_batch(config, params, x, mode="infer")
        probs[start : start + x.shape[0]] = res.probs
    return probs


def predict_batch(config: ModelConfig, params: ParamSet, data: Dataset, batch_size: int = 8):
    """Inference-mode probabilities for every dataset sample, in dataset order."""
    return predict_probs(config, params, [s.volume for s in data.samples], batch_size)


def evaluate(
    config: ModelConfig, params: ParamSet, data: Dataset, positive_class: str = "preterm"
) -> Metrics:
    """Accuracy, TPR/TNR against `positive_class`, and the confusion matrix.

    Rates whose denominator is empty are reported as None rather than 0.
    """
    if len(data) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    k = config.n_classes
    probs = predict_batch(config, params, data)
    preds = probs.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    records = []
    for i, s in enumerate(data.samples):
        confusion[s.label, preds[i]] += 1
        records.append(PredictionRecord(s.subject_id, s.label, int(preds[i]), probs[i]))
    accuracy = float(np.trace(confusion)) / len(data)
    tpr = tnr = None
    if positive_class in config.class_names:
        pos = config.class_names.index(positive_class)
        n_pos = confusion[pos].sum()
        n_neg = confusion.sum() - n_pos
        if n_pos > 0:
            tpr = float(confusion[pos, pos]) / float(n_pos)
        if n_neg > 0:
            neg_correct = np.trace(confusion) - confusion[pos, pos]
            tnr = float(neg_correct) / float(n_neg)
    return Metrics(accuracy, tpr, tnr, confusion, records, positive_class)


# ---------------------------------------------------------------------------
# Report files


def write_history_csv(history: TrainHistory, path: str | Path, epoch_size: int | None = None) -> None:
    """Per-iteration CSV: iteration, lr, loss, val_accuracy (epoch rows only)."""
    val_by_iteration = {}
    if epoch_size:
        for rec in history.epochs:
            if rec.val_accuracy is not None:
                val_by_iteration[(rec.epoch + 1) * epoch_size - 1] = rec.val_accuracy
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "lr", "loss", "val_accuracy"])
        for rec in history.iterations:
            val = val_by_iteration.get(rec.iteration, "")
            writer.writerow([rec.iteration, repr(rec.lr), repr(rec.loss), val])


def format_metrics_report(metrics: Metrics, class_names: tuple[str, ...]) -> str:
    """Line-oriented key=value report; undefined rates are omitted."""
    lines = [f"n_samples={sum(int(r) for r in metrics.confusion.sum(axis=1))}"]
    lines.append(f"accuracy={metrics.accuracy!r}")
    lines.append(f"positive_class={metrics.positive_class}")
    if metrics.true_positive_rate is not None:
        lines.append(f"true_positive_rate={metrics.true_positive_rate!r}")
    if metrics.true_negative_rate is not None:
        lines.append(f"true_negative_rate={metrics.true_negative_rate!r}")
    for i, true_name in enumerate(class_names):
        for j, pred_name in enumerate(class_names):
            lines.append(f"confusion.{true_name}.{pred_name}={int(metrics.confusion[i, j])}")
    return "\n".join(lines) + "\n"


def write_metrics_report(metrics: Metrics, class_names: tuple[str, ...], path: str | Path) -> None:
    Path(path).write_text(format_metrics_report(metrics, class_names))
