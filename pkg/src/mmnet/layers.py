"""Numerical kernels: activations, convolutions, batch norm, pooling, dense, softmax.

All kernels operate on NHWC arrays (or N×features for the dense path) and keep
the dtype of their input, so the same code runs in float32 for inference and
float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import mean_var_over_batch

# exp() argument bounds; keeps sigmoid finite in both float32 and float64
_EXP_CLAMP = {np.dtype(np.float32): 80.0, np.dtype(np.float64): 700.0}


class Activation(str, Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"
    SWISH = "swish"


@dataclass(frozen=True)
class ActivationKind:
    name: Activation
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "name", Activation(self.name))
        if self.name is Activation.SWISH and not self.beta > 0:
            raise ConfigError(f"swish beta must be > 0, got {self.beta}")

    @classmethod
    def parse(cls, text: str) -> "ActivationKind":
        """Parse ``relu``, ``swish`` or ``swish:1.5``."""
        name, _, beta = text.strip().lower().partition(":")
        return cls(Activation(name), float(beta) if beta else 1.0)

    def __str__(self) -> str:
        if self.name is Activation.SWISH and self.beta != 1.0:
            return f"swish:{self.beta:g}"
        return self.name.value


SIGMOID = ActivationKind(Activation.SIGMOID)
TANH = ActivationKind(Activation.TANH)
RELU = ActivationKind(Activation.RELU)
SWISH = ActivationKind(Activation.SWISH)


def _float(x) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    return x


def sigmoid(x) -> np.ndarray:
    x = _float(x)
    lim = _EXP_CLAMP.get(x.dtype, 80.0)
    z = np.clip(x, -lim, lim)
    return (1.0 / (1.0 + np.exp(-z))).astype(x.dtype, copy=False)


def swish(x, beta: float = 1.0) -> np.ndarray:
    x = _float(x)
    return (x * sigmoid(x * x.dtype.type(beta))).astype(x.dtype, copy=False)


def activation_apply(kind: ActivationKind, x) -> np.ndarray:
    x = _float(x)
    if kind.name is Activation.SIGMOID:
        return sigmoid(x)
    if kind.name is Activation.TANH:
        return np.tanh(x)
    if kind.name is Activation.RELU:
        return np.where(x > 0, x, x.dtype.type(0))
    if kind.name is Activation.SWISH:
        return swish(x, kind.beta)
    raise ValueError(f"unknown activation {kind!r}")


def activation_derivative(kind: ActivationKind, x) -> np.ndarray:
    x = _float(x)
    one = x.dtype.type(1)
    if kind.name is Activation.SIGMOID:
        s = sigmoid(x)
        return s * (one - s)
    if kind.name is Activation.TANH:
        t = np.tanh(x)
        return one - t * t
    if kind.name is Activation.RELU:
        # subgradient 0 at exactly x == 0
        return (x > 0).astype(x.dtype)
    if kind.name is Activation.SWISH:
        b = x.dtype.type(kind.beta)
        s = sigmoid(b * x)
        return s + b * x * s * (one - s)
    raise ValueError(f"unknown activation {kind!r}")


# -- convolution -------------------------------------------------------------


class ConvMode(str, Enum):
    STANDARD = "standard"
    DEPTHWISE = "depthwise"
    POINTWISE = "pointwise"


@dataclass
class ConvParams:
    """Kernel layouts: standard (kh, kw, in, out); depthwise (kh, kw, C); pointwise (1, 1, in, out)."""

    kernel: np.ndarray
    stride: int = 1
    padding: str = "same"
    mode: ConvMode = ConvMode.STANDARD
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mode = ConvMode(self.mode)
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.stride < 1:
            raise ConfigError("stride must be positive")
        k = self.kernel
        if self.mode is ConvMode.DEPTHWISE and k.ndim != 3:
            raise ShapeError(f"depthwise kernel must be (kh, kw, C), got {k.shape}")
        if self.mode is not ConvMode.DEPTHWISE and k.ndim != 4:
            raise ShapeError(f"{self.mode.value} kernel must be (kh, kw, in, out), got {k.shape}")
        if self.mode is ConvMode.POINTWISE and k.shape[:2] != (1, 1):
            raise ShapeError(f"pointwise kernel must be 1x1, got {k.shape[:2]}")


def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if size < k:
        raise ShapeError(f"valid convolution needs input >= kernel ({size} < {k})")
    return (size - k) // stride + 1


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _pad_input(x: np.ndarray, kh: int, kw: int, stride: int, padding: str) -> np.ndarray:
    if padding == "valid":
        return x
    ph = _same_pads(x.shape[1], kh, stride)
    pw = _same_pads(x.shape[2], kw, stride)
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), ph, pw, (0, 0)))


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Cross-correlation (no kernel flip) over an NHWC input."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got rank {x.ndim}")
    k = p.kernel.astype(x.dtype, copy=False)
    kh, kw = k.shape[:2]
    c_in = x.shape[3]
    expected_in = k.shape[2]
    if c_in != expected_in:
        raise ShapeError(f"{p.mode.value} kernel expects {expected_in} input channels, got {c_in}")
    s = p.stride
    ho = conv_output_size(x.shape[1], kh, s, p.padding)
    wo = conv_output_size(x.shape[2], kw, s, p.padding)

    if p.mode is ConvMode.POINTWISE and s == 1:
        out = x @ k[0, 0]
    else:
        xp = _pad_input(x, kh, kw, s, p.padding)
        n = x.shape[0]
        c_out = c_in if p.mode is ConvMode.DEPTHWISE else k.shape[3]
        out = np.zeros((n, ho, wo, c_out), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                window = xp[:, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s, :]
                if p.mode is ConvMode.DEPTHWISE:
                    out += window * k[i, j]
                else:
                    out += window @ k[i, j]
    if p.bias is not None:
        out = out + p.bias.astype(x.dtype, copy=False)
    return out


# -- batch normalisation -----------------------------------------------------


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.99

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ConfigError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ConfigError("running variance must be non-negative")

    @classmethod
    def identity(cls, features: int, dtype=np.float32, **kw) -> "BatchNormParams":
        return cls(
            gamma=np.ones(features, dtype),
            beta=np.zeros(features, dtype),
            running_mean=np.zeros(features, dtype),
            running_var=np.ones(features, dtype),
            **kw,
        )


def _reduced_count(x: np.ndarray) -> int:
    return int(np.prod(x.shape[:-1])) if x.ndim > 1 else int(x.shape[0])


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, training: bool) -> np.ndarray:
    """Normalise over every axis but the last.

    In training mode the batch statistics are used and the running averages in
    ``p`` are updated in place; inference mode reads the running averages.
    """
    if x.shape[-1] != p.gamma.shape[0]:
        raise ShapeError(f"batch norm over {p.gamma.shape[0]} features got input {x.shape}")
    dt = x.dtype
    if training:
        if _reduced_count(x) < 2:
            raise ConfigError("training-mode batch norm needs at least 2 values per feature")
        mean, var = mean_var_over_batch(x, -1)
        m = p.momentum
        p.running_mean[...] = m * p.running_mean + (1 - m) * mean
        p.running_var[...] = m * p.running_var + (1 - m) * var
    else:
        mean, var = p.running_mean, p.running_var
    inv = (1.0 / np.sqrt(var.astype(dt) + dt.type(p.epsilon))).astype(dt)
    return ((x - mean.astype(dt)) * (inv * p.gamma.astype(dt)) + p.beta.astype(dt)).astype(dt, copy=False)


def batchnorm_train_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, epsilon: float):
    """Training-mode forward returning ``(out, cache)`` for :func:`batchnorm_backward`.

    Does not touch running statistics.
    """
    mean, var = mean_var_over_batch(x, -1)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma, mean, var)


def batchnorm_backward(dout: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients ``(dx, dgamma, dbeta)`` for a 2-D (batch, features) training-mode batch norm."""
    xhat, inv_std, gamma, _, _ = cache
    m = dout.shape[0]
    dbeta = dout.sum(axis=0)
    dgamma = (dout * xhat).sum(axis=0)
    dxhat = dout * gamma
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


# -- pooling, dense, softmax -------------------------------------------------


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NHWC input, got rank {x.ndim}")
    return x.mean(axis=(1, 2))


@dataclass
class DenseParams:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(f"dense weights {self.weights.shape} do not match bias {self.bias.shape}")


def dense_forward(x: np.ndarray, p: DenseParams) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != p.weights.shape[0]:
        raise ShapeError(f"dense layer expects inner dim {p.weights.shape[0]}, got {x.shape[-1]}")
    dt = x.dtype if x.dtype.kind == "f" else p.weights.dtype
    return x.astype(dt, copy=False) @ p.weights.astype(dt, copy=False) + p.bias.astype(dt, copy=False)


def dense_backward(x: np.ndarray, p: DenseParams, dout: np.ndarray):
    """Return ``(dx, dW, db)``."""
    return dout @ p.weights.T, x.T @ dout, dout.sum(axis=0)


def softmax(x: np.ndarray) -> np.ndarray:
    x = _float(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dropout_mask(shape, rate: float, rng, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by ``1 / (1 - rate)``."""
    if rate <= 0:
        return np.ones(shape, dtype)
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)
