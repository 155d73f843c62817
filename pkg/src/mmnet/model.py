"""MobileNet v1 backbone, the two classifier heads, accounting and inference.

An :class:`ArchitectureSpec` is a flat list of layer descriptors. Parameters
live in a :class:`~mmnet.weights.WeightStore` keyed ``<layer>/<param>``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from . import layers as L
from .errors import ConfigError, ShapeError
from .layers import ActivationKind, ConvMode
from .tensor import Rng
from .weights import WeightStore

BACKBONE = "backbone"
HEAD = "head"

# (pointwise filters, depthwise stride) for the 13 separable blocks
MOBILENET_V1_BLOCKS: tuple[tuple[int, int], ...] = (
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
)
STEM_FILTERS = 32
REDUCED_HIDDEN = 512
DEFAULT_DROPOUT = 0.5


class HeadKind(str, Enum):
    BASELINE = "baseline"
    REDUCED = "reduced"


# -- layer descriptors --------------------------------------------------------


@dataclass(frozen=True)
class Conv:
    name: str
    mode: ConvMode
    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: str = "same"
    use_bias: bool = False


@dataclass(frozen=True)
class BatchNorm:
    name: str
    features: int
    epsilon: float = 1e-5
    momentum: float = 0.99


@dataclass(frozen=True)
class Act:
    name: str
    kind: ActivationKind


@dataclass(frozen=True)
class GlobalPool:
    name: str


@dataclass(frozen=True)
class Dense:
    name: str
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Dropout:
    name: str
    rate: float = DEFAULT_DROPOUT


@dataclass(frozen=True)
class Softmax:
    name: str


Layer = Union[Conv, BatchNorm, Act, GlobalPool, Dense, Dropout, Softmax]


@dataclass(frozen=True)
class ParamInfo:
    name: str
    shape: tuple[int, ...]
    trainable: bool


def layer_params(layer: Layer) -> list[ParamInfo]:
    n = layer.name
    if isinstance(layer, Conv):
        k = layer.kernel_size
        if layer.mode is ConvMode.DEPTHWISE:
            out = [ParamInfo(f"{n}/kernel", (k, k, layer.in_channels), True)]
        else:
            out = [ParamInfo(f"{n}/kernel", (k, k, layer.in_channels, layer.out_channels), True)]
        if layer.use_bias:
            out.append(ParamInfo(f"{n}/bias", (layer.out_channels,), True))
        return out
    if isinstance(layer, BatchNorm):
        f = (layer.features,)
        return [
            ParamInfo(f"{n}/gamma", f, True),
            ParamInfo(f"{n}/beta", f, True),
            ParamInfo(f"{n}/running_mean", f, False),
            ParamInfo(f"{n}/running_var", f, False),
        ]
    if isinstance(layer, Dense):
        return [ParamInfo(f"{n}/weights", (layer.in_dim, layer.out_dim), True), ParamInfo(f"{n}/bias", (layer.out_dim,), True)]
    return []


def layer_part(layer: Layer) -> str:
    return layer.name.split("/", 1)[0]


@dataclass
class ArchitectureSpec:
    layers: list[Layer]
    input_shape: tuple[int, int, int] = (224, 224, 3)
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError("layer names must be unique")
        self.shapes()  # validates chaining

    def __iter__(self) -> Iterator[Layer]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def backbone_layers(self) -> list[Layer]:
        return [l for l in self.layers if layer_part(l) == BACKBONE]

    @property
    def head_layers(self) -> list[Layer]:
        return [l for l in self.layers if layer_part(l) == HEAD]

    def params(self, scope: str = "all") -> list[ParamInfo]:
        return [p for l in _scoped(self, scope) for p in layer_params(l)]

    def param_names(self, scope: str = "all", trainable_only: bool = False) -> list[str]:
        return [p.name for p in self.params(scope) if p.trainable or not trainable_only]

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape after every layer; raises on a broken chain."""
        shape: tuple[int, ...] = self.input_shape
        out = []
        for layer in self.layers:
            shape = _output_shape(layer, shape)
            out.append(shape)
        return out

    def validate_complete(self) -> None:
        soft = [i for i, l in enumerate(self.layers) if isinstance(l, Softmax)]
        if soft != [len(self.layers) - 1]:
            raise ConfigError("a complete model needs exactly one softmax, as its last layer")
        if self.num_classes is not None and self.shapes()[-1] != (self.num_classes,):
            raise ConfigError(f"model emits {self.shapes()[-1]} but num_classes is {self.num_classes}")


def _output_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Conv):
        if len(shape) != 3:
            raise ShapeError(f"{layer.name}: convolution needs an HxWxC input, got {shape}")
        h, w, c = shape
        if c != layer.in_channels:
            raise ShapeError(f"{layer.name}: expects {layer.in_channels} channels, got {c}")
        k, s = layer.kernel_size, layer.stride
        return (
            L.conv_output_size(h, k, s, layer.padding),
            L.conv_output_size(w, k, s, layer.padding),
            layer.out_channels,
        )
    if isinstance(layer, BatchNorm):
        if shape[-1] != layer.features:
            raise ShapeError(f"{layer.name}: expects {layer.features} features, got {shape}")
        return shape
    if isinstance(layer, GlobalPool):
        if len(shape) != 3:
            raise ShapeError(f"{layer.name}: pooling needs an HxWxC input, got {shape}")
        return (shape[2],)
    if isinstance(layer, Dense):
        if shape != (layer.in_dim,):
            raise ShapeError(f"{layer.name}: expects ({layer.in_dim},) input, got {shape}")
        return (layer.out_dim,)
    return shape


def _scoped(spec: ArchitectureSpec, scope: str) -> list[Layer]:
    if scope == "all":
        return list(spec.layers)
    if scope == BACKBONE:
        return spec.backbone_layers
    if scope == HEAD:
        return spec.head_layers
    if scope == "trunk":
        return [l for l in spec.head_layers if not l.name.endswith("/classifier")]
    raise ValueError(f"unknown scope {scope!r}")


# -- builders ----------------------------------------------------------------


def _scale(channels: int, width: float) -> int:
    return max(1, int(channels * width))


def build_backbone(
    input_shape: Sequence[int] = (224, 224, 3),
    width: float = 1.0,
    activation: ActivationKind = L.RELU,
) -> ArchitectureSpec:
    """The 28-layer MobileNet v1 feature extractor, ending before pooling."""
    h, w, c = (int(d) for d in input_shape)
    if h % 32 or w % 32:
        raise ConfigError(f"input extent {h}x{w} must be divisible by 32")
    if not width > 0:
        raise ConfigError("width multiplier must be positive")
    ch = _scale(STEM_FILTERS, width)
    layers: list[Layer] = [
        Conv("backbone/conv1", ConvMode.STANDARD, 3, c, ch, stride=2),
        BatchNorm("backbone/conv1_bn", ch),
        Act("backbone/conv1_act", activation),
    ]
    for i, (filters, stride) in enumerate(MOBILENET_V1_BLOCKS, start=1):
        out = _scale(filters, width)
        p = f"backbone/block{i}"
        layers += [
            Conv(f"{p}_dw", ConvMode.DEPTHWISE, 3, ch, ch, stride=stride),
            BatchNorm(f"{p}_dw_bn", ch),
            Act(f"{p}_dw_act", activation),
            Conv(f"{p}_pw", ConvMode.POINTWISE, 1, ch, out),
            BatchNorm(f"{p}_pw_bn", out),
            Act(f"{p}_pw_act", activation),
        ]
        ch = out
    return ArchitectureSpec(layers, (h, w, c))


def build_head(
    kind: HeadKind | str,
    num_classes: int,
    in_features: int = 1024,
    hidden: int = REDUCED_HIDDEN,
    activation: ActivationKind = L.SWISH,
    dropout: float = DEFAULT_DROPOUT,
) -> list[Layer]:
    kind = HeadKind(kind)
    if num_classes < 2:
        raise ConfigError("a classifier needs at least two classes")
    if kind is HeadKind.BASELINE:
        return [
            GlobalPool("head/pool"),
            Dense("head/classifier", in_features, num_classes),
            Softmax("head/softmax"),
        ]
    return [
        GlobalPool("head/pool"),
        BatchNorm("head/bn1", in_features),
        Dense("head/fc1", in_features, hidden),
        BatchNorm("head/bn2", hidden),
        Act("head/act", activation),
        Dropout("head/dropout", dropout),
        Dense("head/classifier", hidden, num_classes),
        Softmax("head/softmax"),
    ]


def build_model(
    num_classes: int,
    head: HeadKind | str = HeadKind.REDUCED,
    input_shape: Sequence[int] = (224, 224, 3),
    width: float = 1.0,
    backbone_activation: ActivationKind = L.RELU,
    head_activation: ActivationKind = L.SWISH,
    hidden: int = REDUCED_HIDDEN,
    dropout: float = DEFAULT_DROPOUT,
) -> ArchitectureSpec:
    backbone = build_backbone(input_shape, width, backbone_activation)
    feat = backbone.shapes()[-1][-1]
    head_layers = build_head(head, num_classes, feat, hidden, head_activation, dropout)
    spec = ArchitectureSpec(backbone.layers + head_layers, backbone.input_shape, num_classes)
    spec.validate_complete()
    return spec


def head_only_spec(
    kind: HeadKind | str,
    num_classes: int,
    in_features: int = 1024,
    hidden: int = REDUCED_HIDDEN,
    activation: ActivationKind = L.SWISH,
    dropout: float = DEFAULT_DROPOUT,
) -> ArchitectureSpec:
    """A head on its own, fed a 1x1xF feature map; used for accounting and gradient checks."""
    layers = build_head(kind, num_classes, in_features, hidden, activation, dropout)
    return ArchitectureSpec(layers, (1, 1, in_features), num_classes)


# -- accounting --------------------------------------------------------------


def count_params(spec: ArchitectureSpec, scope: str = "all", counting: str = "total") -> int:
    if counting not in ("total", "trainable"):
        raise ValueError(f"counting must be 'total' or 'trainable', got {counting!r}")
    return sum(int(np.prod(p.shape)) for p in spec.params(scope) if counting == "total" or p.trainable)


def layer_flops(layer: Layer, in_shape: tuple[int, ...], out_shape: tuple[int, ...]) -> int:
    """Multiply-accumulate count for one sample."""
    if isinstance(layer, Conv):
        ho, wo = out_shape[0], out_shape[1]
        k2 = layer.kernel_size**2
        if layer.mode is ConvMode.DEPTHWISE:
            return k2 * layer.in_channels * ho * wo
        return k2 * layer.in_channels * layer.out_channels * ho * wo
    if isinstance(layer, Dense):
        return layer.in_dim * layer.out_dim
    return 0


def count_flops(spec: ArchitectureSpec, scope: str = "all") -> int:
    selected = {l.name for l in _scoped(spec, scope)}
    total = 0
    shape = spec.input_shape
    for layer, out in zip(spec.layers, spec.shapes()):
        if layer.name in selected:
            total += layer_flops(layer, shape, out)
        shape = out
    return total


def describe(spec: ArchitectureSpec) -> str:
    """Human-readable layer table."""
    rows = [("layer", "type", "output", "params", "MACs")]
    shape = spec.input_shape
    for layer, out in zip(spec.layers, spec.shapes()):
        kind = type(layer).__name__
        if isinstance(layer, Conv):
            kind = f"Conv/{layer.mode.value} {layer.kernel_size}x{layer.kernel_size} s{layer.stride}"
        elif isinstance(layer, Act):
            kind = f"Act/{layer.kind}"
        elif isinstance(layer, Dropout):
            kind = f"Dropout {layer.rate:g}"
        n = sum(int(np.prod(p.shape)) for p in layer_params(layer))
        rows.append((layer.name, kind, "x".join(map(str, out)), f"{n:,}", f"{layer_flops(layer, shape, out):,}"))
        shape = out
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    lines = ["  ".join(c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    lines.append("-" * len(lines[0]))
    lines.append(f"total params {count_params(spec):,}  trainable {count_params(spec, counting='trainable'):,}  MACs {count_flops(spec):,}")
    return "\n".join(lines)


# -- weights -----------------------------------------------------------------


def init_weights(spec: ArchitectureSpec, seed: int, dtype=np.float32) -> WeightStore:
    """Seeded stand-in for pretrained weights.

    Convolutions use He-normal scaling on their fan-in, dense layers Glorot
    uniform; batch norm starts as the identity. Every parameter draws from its
    own counter-split stream so adding a layer never shifts the others.
    """
    root = Rng(seed)
    store = WeightStore(seed=seed)
    for idx, p in enumerate(spec.params()):
        rng = root.child(idx)
        leaf = p.name.rsplit("/", 1)[1]
        if leaf == "kernel":
            fan_in = int(np.prod(p.shape[:-1])) if len(p.shape) == 4 else p.shape[0] * p.shape[1]
            value = rng.normal(0.0, np.sqrt(2.0 / fan_in), p.shape)
        elif leaf == "weights":
            lim = np.sqrt(6.0 / (p.shape[0] + p.shape[1]))
            value = rng.uniform(-lim, lim, p.shape)
        elif leaf in ("gamma", "running_var"):
            value = np.ones(p.shape)
        else:
            value = np.zeros(p.shape)
        store[p.name] = value.astype(dtype)
    return store


def check_bound(spec: ArchitectureSpec, weights: WeightStore) -> None:
    for p in spec.params():
        w = weights[p.name]
        if w.shape != p.shape:
            raise ShapeError(f"{p.name}: stored shape {w.shape} != expected {p.shape}")


def _bn_params(layer: BatchNorm, weights: WeightStore) -> L.BatchNormParams:
    n = layer.name
    return L.BatchNormParams(
        weights[f"{n}/gamma"],
        weights[f"{n}/beta"],
        weights[f"{n}/running_mean"],
        weights[f"{n}/running_var"],
        layer.epsilon,
        layer.momentum,
    )


def apply_layer(layer: Layer, weights: WeightStore, x: np.ndarray, training: bool, rng: Optional[Rng]) -> np.ndarray:
    if isinstance(layer, Conv):
        bias = weights[f"{layer.name}/bias"] if layer.use_bias else None
        p = L.ConvParams(weights[f"{layer.name}/kernel"], layer.stride, layer.padding, layer.mode, bias)
        return L.conv2d(x, p)
    if isinstance(layer, BatchNorm):
        return L.batchnorm_forward(x, _bn_params(layer, weights), training)
    if isinstance(layer, Act):
        return L.activation_apply(layer.kind, x)
    if isinstance(layer, GlobalPool):
        return L.global_avg_pool(x)
    if isinstance(layer, Dense):
        return L.dense_forward(x, L.DenseParams(weights[f"{layer.name}/weights"], weights[f"{layer.name}/bias"]))
    if isinstance(layer, Dropout):
        if not training or layer.rate <= 0:
            return x
        if rng is None:
            raise ConfigError("train-mode dropout needs an Rng")
        return x * L.dropout_mask(x.shape, layer.rate, rng, x.dtype)
    if isinstance(layer, Softmax):
        return L.softmax(x)
    raise TypeError(f"unknown layer {layer!r}")


def run_layers(
    layers: Sequence[Layer],
    weights: WeightStore,
    x: np.ndarray,
    training: bool = False,
    rng: Optional[Rng] = None,
    stats: Optional[dict] = None,
) -> np.ndarray:
    peak = 0
    for layer in layers:
        y = apply_layer(layer, weights, x, training, rng)
        peak = max(peak, x.nbytes + y.nbytes)
        x = y
    if stats is not None:
        stats["peak_bytes"] = max(stats.get("peak_bytes", 0), peak)
    return x


def forward(
    spec: ArchitectureSpec,
    weights: WeightStore,
    x: np.ndarray,
    mode: str = "infer",
    rng: Optional[Rng] = None,
    stats: Optional[dict] = None,
    batch_size: int = 64,
) -> np.ndarray:
    """Class probabilities for an NHWC batch.

    ``mode="train"`` uses batch statistics (updating the running averages held
    in ``weights``) and active dropout; ``mode="infer"`` is pure and processes
    the input in chunks of ``batch_size``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"input {x.shape[1:]} does not match model input {spec.input_shape}")
    if x.dtype.kind != "f":
        x = x.astype(np.float32)
    if mode == "train":
        return run_layers(spec.layers, weights, x, True, rng, stats)
    chunks = [run_layers(spec.layers, weights, x[i : i + batch_size], False, None, stats) for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks, axis=0)


def backbone_features(
    spec: ArchitectureSpec, weights: WeightStore, x: np.ndarray, batch_size: int = 64, stats: Optional[dict] = None
) -> np.ndarray:
    """Frozen backbone in inference mode followed by the head's global pooling."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"input {x.shape[1:]} does not match model input {spec.input_shape}")
    bb = spec.backbone_layers
    out = []
    for i in range(0, len(x), batch_size):
        xb = x[i : i + batch_size]
        if xb.dtype.kind != "f":
            xb = xb.astype(np.float32)
        fmap = run_layers(bb, weights, xb, False, None, stats)
        out.append(L.global_avg_pool(fmap) if fmap.ndim == 4 else fmap)
    return np.concatenate(out, axis=0)
