"""Head-only transfer learning on top of a frozen backbone.

The backbone runs once in inference mode to produce pooled features; only the
head (dense layers and head batch norm) is differentiated and updated.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import layers as L
from .errors import ConfigError, ContractError, ShapeError, StratificationError
from .layers import ActivationKind
from .model import (
    Act,
    ArchitectureSpec,
    BatchNorm,
    Dense,
    Dropout,
    GlobalPool,
    Softmax,
    backbone_features,
    run_layers,
)
from .synthetic import Dataset
from .tensor import Rng
from .weights import WeightStore, save_weights

log = logging.getLogger(__name__)

REPORT_SCHEMA = "mmnet.train_report/1"
PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    frozen_prefix: tuple[str, ...] = ("backbone",)
    activation: ActivationKind = L.SWISH
    momentum: float = 0.0
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if not 0 <= self.learning_rate <= 1:
            raise ConfigError(f"learning rate must lie in [0, 1], got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2 for batch norm")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        self.frozen_prefix = tuple(self.frozen_prefix)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: Optional[float] = None
    val_accuracy: Optional[float] = None
    seconds: float = 0.0


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    weights: Optional[WeightStore] = None
    config: dict = field(default_factory=dict)

    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def to_jsonl(self, include_timing: bool = True) -> str:
        lines = [json.dumps({"schema": REPORT_SCHEMA, "kind": "config", **self.config}, sort_keys=True)]
        for e in self.epochs:
            rec = asdict(e)
            if not include_timing:
                rec.pop("seconds")
            lines.append(json.dumps({"schema": REPORT_SCHEMA, "kind": "epoch", **rec}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


def cross_entropy(probs: np.ndarray, labels) -> float:
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(labels) != len(probs):
        raise ShapeError(f"probabilities {probs.shape} do not match {len(labels)} labels")
    c = probs.shape[1]
    if len(labels) and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range for {c} classes")
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


# -- head forward / backward -------------------------------------------------


def head_layers_after_pool(spec: ArchitectureSpec):
    head = spec.head_layers
    if head and isinstance(head[0], GlobalPool):
        head = head[1:]
    if not head or not isinstance(head[-1], Softmax) or not isinstance(head[-2], Dense):
        raise ConfigError("head must end with a dense classifier followed by softmax")
    return head


def trainable_head_params(spec: ArchitectureSpec, frozen_prefix: Sequence[str] = ("backbone",)) -> list[str]:
    names = spec.param_names("head", trainable_only=True)
    return [n for n in names if not any(n.startswith(p) for p in frozen_prefix)]


def _pooled(spec: ArchitectureSpec, weights: WeightStore, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim == 2:
        return batch
    if batch.ndim == 4 and tuple(batch.shape[1:]) == spec.input_shape:
        if spec.backbone_layers:
            return backbone_features(spec, weights, batch)
        return L.global_avg_pool(batch)
    raise ShapeError(f"cannot interpret batch of shape {batch.shape}")


def head_forward(
    spec: ArchitectureSpec,
    weights: WeightStore,
    feats: np.ndarray,
    training: bool,
    rng: Optional[Rng] = None,
    update_stats: bool = False,
):
    """Run the head on pooled features; returns ``(probs, caches)``.

    In training mode batch norm uses batch statistics. Running averages move
    only when ``update_stats`` is set, so gradient checks can call this
    repeatedly without side effects.
    """
    x = feats
    caches = []
    for layer in head_layers_after_pool(spec):
        if isinstance(layer, BatchNorm) and training:
            g, b = weights[f"{layer.name}/gamma"], weights[f"{layer.name}/beta"]
            if x.shape[0] < 2:
                raise ConfigError("training-mode batch norm needs a batch of at least 2")
            y, cache = L.batchnorm_train_forward(x, g.astype(x.dtype), b.astype(x.dtype), layer.epsilon)
            if update_stats:
                m = layer.momentum
                rm, rv = weights[f"{layer.name}/running_mean"], weights[f"{layer.name}/running_var"]
                rm[...] = m * rm + (1 - m) * cache[3]
                rv[...] = m * rv + (1 - m) * cache[4]
        elif isinstance(layer, Dense):
            p = L.DenseParams(weights[f"{layer.name}/weights"].astype(x.dtype), weights[f"{layer.name}/bias"].astype(x.dtype))
            y, cache = L.dense_forward(x, p), p
        elif isinstance(layer, Act):
            y, cache = L.activation_apply(layer.kind, x), None
        elif isinstance(layer, Dropout) and training and layer.rate > 0:
            if rng is None:
                raise ConfigError("train-mode dropout needs an Rng")
            mask = L.dropout_mask(x.shape, layer.rate, rng, x.dtype)
            y, cache = x * mask, mask
        else:
            y = run_layers([layer], weights, x, training, rng)
            cache = None
        caches.append((layer, x, cache))
        x = y
    return x, caches


def _backward_from_caches(probs: np.ndarray, labels: np.ndarray, caches, wanted: set[str]) -> dict[str, np.ndarray]:
    n = len(labels)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    grads: dict[str, np.ndarray] = {}
    # caches[-1] is the softmax, folded into ``grad`` above
    for layer, x_in, cache in reversed(caches[:-1]):
        if isinstance(layer, Dense):
            dx, dw, db = L.dense_backward(x_in, cache, grad)
            grads[f"{layer.name}/weights"], grads[f"{layer.name}/bias"] = dw, db
            grad = dx
        elif isinstance(layer, BatchNorm):
            dx, dg, db = L.batchnorm_backward(grad, cache)
            grads[f"{layer.name}/gamma"], grads[f"{layer.name}/beta"] = dg, db
            grad = dx
        elif isinstance(layer, Act):
            grad = grad * L.activation_derivative(layer.kind, x_in)
        elif isinstance(layer, Dropout):
            if cache is not None:
                grad = grad * cache
        else:
            raise ContractError(f"no backward rule for {layer.name}")
    return {k: v for k, v in grads.items() if k in wanted}


def head_backward(
    spec: ArchitectureSpec,
    weights: WeightStore,
    batch: np.ndarray,
    labels,
    rng: Optional[Rng] = None,
    params: Optional[Iterable[str]] = None,
    frozen_prefix: Sequence[str] = ("backbone",),
) -> dict[str, np.ndarray]:
    """Analytic gradients of mean cross-entropy w.r.t. the trainable head parameters.

    ``batch`` is either pooled features (N, F) or raw input images. Asking
    for a frozen or non-trainable parameter raises :class:`ContractError`.
    """
    allowed = trainable_head_params(spec, frozen_prefix)
    wanted = set(allowed) if params is None else set(params)
    illegal = sorted(wanted - set(allowed))
    if illegal:
        raise ContractError(f"gradients are only available for trainable head parameters; got {illegal[0]!r}")
    labels = np.asarray(labels, dtype=np.int64)
    feats = _pooled(spec, weights, batch)
    probs, caches = head_forward(spec, weights, feats, True, rng)
    return _backward_from_caches(probs, labels, caches, wanted)


def head_loss(spec, weights, batch, labels, rng: Optional[Rng] = None) -> float:
    """Training-mode loss with the same conventions as :func:`head_backward`."""
    feats = _pooled(spec, weights, batch)
    probs, _ = head_forward(spec, weights, feats, True, rng)
    return cross_entropy(probs, labels)


def sgd_step(weights: WeightStore, grads: dict[str, np.ndarray], lr: float, velocity: Optional[dict] = None, momentum: float = 0.0) -> WeightStore:
    """In-place ``w -= lr * g``; with ``momentum`` > 0 a heavy-ball velocity is kept in ``velocity``."""
    for name, g in grads.items():
        if name not in weights:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        w = weights[name]
        if g.shape != w.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs weight {w.shape}")
        step = g
        if momentum and velocity is not None:
            v = velocity.get(name)
            v = g if v is None else momentum * v + g
            velocity[name] = v
            step = v
        w -= (lr * step).astype(w.dtype)
    return weights


# -- training loop -----------------------------------------------------------


def _batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def evaluate_head(spec: ArchitectureSpec, weights: WeightStore, feats: np.ndarray, labels) -> tuple[float, float, np.ndarray]:
    """Inference-mode ``(loss, accuracy, probs)`` on pooled features."""
    probs, _ = head_forward(spec, weights, feats, False)
    labels = np.asarray(labels)
    return cross_entropy(probs, labels), float(np.mean(probs.argmax(1) == labels)), probs


def backbone_digest(spec: ArchitectureSpec, weights: WeightStore) -> bytes:
    return b"".join(weights[n].tobytes() for n in spec.param_names("backbone"))


def train_head(
    spec: ArchitectureSpec,
    weights: WeightStore,
    dataset: Dataset,
    cfg: TrainConfig,
    val: Optional[Dataset] = None,
    augment: Optional[Callable[[int, np.ndarray], np.ndarray]] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainReport:
    """Train the head in place on ``weights``; the backbone is never written.

    ``augment(epoch, images)`` may return a transformed copy of the training
    images each epoch, in which case backbone features are recomputed.
    """
    if len(dataset) == 0:
        raise StratificationError("training set is empty")
    c = spec.num_classes or dataset.num_classes
    counts = np.bincount(dataset.labels, minlength=c)
    empty = [dataset.class_names[i] if i < len(dataset.class_names) else str(i) for i in np.flatnonzero(counts == 0)]
    if empty:
        raise StratificationError(f"classes without training samples: {', '.join(empty)}")

    trainable = trainable_head_params(spec, cfg.frozen_prefix)
    frozen_before = backbone_digest(spec, weights)
    root = Rng(cfg.seed)
    feats = None if augment else _pooled(spec, weights, dataset.images)
    val_feats = _pooled(spec, weights, val.images) if val is not None and len(val) else None
    velocity: dict = {}
    report = TrainReport(config=_config_echo(cfg))

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        erng = root.child(epoch)
        if augment:
            feats = _pooled(spec, weights, augment(epoch, dataset.images))
        order = erng.permutation(len(dataset))
        losses, sizes = [], []
        for idx in _batches(len(dataset), cfg.batch_size, order):
            probs, caches = head_forward(spec, weights, feats[idx], True, erng, update_stats=True)
            y = dataset.labels[idx]
            losses.append(cross_entropy(probs, y))
            sizes.append(len(idx))
            grads = _backward_from_caches(probs, y, caches, set(trainable))
            sgd_step(weights, grads, cfg.learning_rate, velocity, cfg.momentum)
        train_loss = float(np.average(losses, weights=sizes))
        _, train_acc, _ = evaluate_head(spec, weights, feats, dataset.labels)
        rec = EpochRecord(epoch + 1, train_loss, train_acc)
        if val_feats is not None:
            rec.val_loss, rec.val_accuracy, _ = evaluate_head(spec, weights, val_feats, val.labels)
        rec.seconds = time.perf_counter() - t0
        if not np.isfinite(rec.train_loss):
            raise FloatingPointError(f"non-finite loss at epoch {epoch + 1}")
        report.epochs.append(rec)
        log.info("epoch %d loss %.4f acc %.4f", rec.epoch, rec.train_loss, rec.train_accuracy)
        if on_epoch:
            on_epoch(rec)
        if cfg.checkpoint_every and cfg.checkpoint_dir and (epoch + 1) % cfg.checkpoint_every == 0:
            Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_weights(weights, Path(cfg.checkpoint_dir) / f"epoch_{epoch + 1:04d}.mmnw")

    if backbone_digest(spec, weights) != frozen_before:
        raise ContractError("backbone parameters changed during head training")
    report.weights = weights
    return report


def _config_echo(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["activation"] = str(cfg.activation)
    d["frozen_prefix"] = list(cfg.frozen_prefix)
    return d


def lr_sweep(
    spec: ArchitectureSpec,
    weights: WeightStore,
    dataset: Dataset,
    grid: Iterable[float],
    cfg: TrainConfig,
    val: Optional[Dataset] = None,
) -> list[tuple[float, float]]:
    """Train a fresh copy of ``weights`` at each rate; rows sorted from the largest rate down.

    Accuracy is measured on ``val`` when given, otherwise on the training set.
    """
    rates = [float(r) for r in grid]
    if not rates:
        raise ConfigError("learning-rate grid is empty")
    unique = sorted(set(rates), reverse=True)
    if len(unique) != len(rates):
        log.warning("duplicate learning rates removed from the sweep grid")
    rows = []
    for lr in unique:
        run_cfg = TrainConfig(**{**asdict(cfg), "learning_rate": lr, "activation": cfg.activation})
        rep = train_head(spec, weights.copy(), dataset, run_cfg, val)
        last = rep.epochs[-1]
        rows.append((lr, last.val_accuracy if val is not None else last.train_accuracy))
    return rows


REFERENCE_LEARNING_RATE = 1e-4
REFERENCE_TRAIN_IMAGES = 29_970


def scaled_learning_rate(train_size: int, base: float = REFERENCE_LEARNING_RATE, reference_size: int = REFERENCE_TRAIN_IMAGES) -> float:
    """Scale ``base`` so ``lr * optimizer steps`` per epoch matches the reference dataset.

    A 2,000-image desk set takes ~15x fewer steps per epoch than the
    29,970-image reference split, so it gets a ~15x larger rate.
    """
    if train_size < 1:
        raise ConfigError("training set size must be positive")
    return min(1.0, base * reference_size / train_size)


def sweep_grid(start: float = 0.1, stop: float = 1e-5) -> list[float]:
    """Exponentially descending decade grid, e.g. 0.1, 0.01, ..., 1e-5."""
    out, lr = [], start
    while lr >= stop * (1 - 1e-9):
        out.append(float(f"{lr:.3g}"))
        lr /= 10
    return out


def gradient_check(
    spec: ArchitectureSpec,
    weights: WeightStore,
    feats: np.ndarray,
    labels,
    h: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-6,
) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients, per parameter.

    Every loss evaluation reuses the dropout mask from ``Rng(seed)`` so the
    objective is a fixed smooth function. Use float64 weights and features.

    Denominators are floored at ``floor``: a shift feeding a batch norm has an
    exactly zero gradient, and there the central difference is pure round-off
    (about eps / h), which only an absolute comparison handles sensibly.
    """
    analytic = head_backward(spec, weights, feats, labels, Rng(seed))
    out = {}
    for name, g in analytic.items():
        w = weights[name]
        numeric = np.empty_like(w)
        for i in np.ndindex(w.shape):
            old = w[i]
            w[i] = old + h
            up = head_loss(spec, weights, feats, labels, Rng(seed))
            w[i] = old - h
            down = head_loss(spec, weights, feats, labels, Rng(seed))
            w[i] = old
            numeric[i] = (up - down) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(numeric)), floor)
        out[name] = float(np.max(np.abs(g - numeric) / denom))
    return out
