"""Activation x batch-size comparison on a frozen backbone."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence


from . import layers as L
from .layers import ActivationKind
from .model import HeadKind, backbone_features, build_model, init_weights
from .synthetic import Dataset
from .training import TrainConfig, train_head

SCHEMA = "mmnet.activation_bench/1"
DEFAULT_ACTIVATIONS = (L.SIGMOID, L.TANH, L.RELU, L.SWISH)
DEFAULT_BATCH_SIZES = (16, 32, 64)


@dataclass(frozen=True)
class BenchRow:
    activation: str
    batch_size: int
    train_accuracy: float
    val_accuracy: Optional[float]
    final_loss: float


def activation_bench(
    train: Dataset,
    val: Optional[Dataset],
    activations: Sequence[ActivationKind] = DEFAULT_ACTIVATIONS,
    batch_sizes: Sequence[int] = DEFAULT_BATCH_SIZES,
    epochs: int = 50,
    learning_rate: float = 1e-3,
    seed: int = 0,
    head: str = HeadKind.REDUCED,
    width: float = 1.0,
) -> list[BenchRow]:
    """Train one head per (activation, batch size) from identical initial weights.

    The backbone is shared by every run, so its features are computed once.
    """
    input_shape = train.images.shape[1:]
    probe = build_model(train.num_classes, head, input_shape, width)
    base = init_weights(probe, seed)
    tr = Dataset(backbone_features(probe, base, train.images), train.labels, train.class_names)
    va = Dataset(backbone_features(probe, base, val.images), val.labels, val.class_names) if val is not None else None

    rows = []
    for act in activations:
        spec = build_model(train.num_classes, head, input_shape, width, head_activation=act)
        for bs in batch_sizes:
            cfg = TrainConfig(learning_rate=learning_rate, epochs=epochs, batch_size=bs, seed=seed, activation=act)
            rep = train_head(spec, base.copy(), tr, cfg, va)
            last = rep.epochs[-1]
            rows.append(BenchRow(str(act), bs, last.train_accuracy, last.val_accuracy, last.train_loss))
    return rows


def bench_table(rows: Sequence[BenchRow]) -> str:
    acts = list(dict.fromkeys(r.activation for r in rows))
    sizes = sorted({r.batch_size for r in rows})
    cell = {(r.activation, r.batch_size): r for r in rows}
    use_val = all(r.val_accuracy is not None for r in rows)
    label = "val acc" if use_val else "train acc"
    lines = [f"{'activation':<10}" + "".join(f"{'bs=' + str(b):>10}" for b in sizes) + f"   ({label})"]
    lines.append("-" * len(lines[0]))
    for a in acts:
        vals = [cell[(a, b)].val_accuracy if use_val else cell[(a, b)].train_accuracy for b in sizes]
        lines.append(f"{a:<10}" + "".join(f"{v:10.4f}" for v in vals))
    return "\n".join(lines)


def bench_ordering(rows: Sequence[BenchRow]) -> dict:
    """Informational: does swish beat relu at every batch size?"""
    cell = {(r.activation, r.batch_size): (r.val_accuracy if r.val_accuracy is not None else r.train_accuracy) for r in rows}
    sizes = sorted({r.batch_size for r in rows})
    if not all(("swish", b) in cell and ("relu", b) in cell for b in sizes):
        return {}
    wins = {b: cell[("swish", b)] > cell[("relu", b)] for b in sizes}
    return {"swish_beats_relu": wins, "all": all(wins.values())}


def bench_json(rows: Sequence[BenchRow]) -> str:
    return json.dumps(
        {
            "schema": SCHEMA,
            "rows": [r.__dict__ for r in rows],
            "ordering": {k: v for k, v in bench_ordering(rows).items()},
        },
        sort_keys=True,
        default=str,
    )
