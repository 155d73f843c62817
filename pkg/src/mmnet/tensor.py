"""Dense tensors, seeded generators and batch reductions.

Tensors are plain :class:`numpy.ndarray` objects in batch/height/width/channel
order. Storage is float32 by default; pass ``dtype=np.float64`` where extra
precision matters (gradient checking).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float32
MAX_RANK = 4


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not dims:
        raise ShapeError("shape must have at least one dimension")
    if len(dims) > MAX_RANK:
        raise ShapeError(f"rank {len(dims)} exceeds the maximum of {MAX_RANK}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"every extent must be >= 1, got {dims}")
    return dims


class Rng:
    """Seeded Philox-4x64 stream.

    Philox is counter-based, so a child stream for item ``i`` is obtained by
    jumping the counter rather than by reseeding; ``Rng(s).child(i)`` is the
    same stream regardless of how many other children were taken before it.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.Philox(key=self.seed)
        self.generator = np.random.Generator(self._bitgen)

    def child(self, index: int) -> "Rng":
        out = Rng.__new__(Rng)
        out.seed = self.seed
        out._bitgen = np.random.Philox(key=self.seed).jumped(int(index) + 1)
        out.generator = np.random.Generator(out._bitgen)
        return out

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


@dataclass(frozen=True)
class Uniform:
    low: float = 0.0
    high: float = 1.0


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    std: float = 1.0


@dataclass(frozen=True)
class Constant:
    value: float = 0.0


Distribution = Union[Uniform, Normal, Constant]


def tensor_filled(shape: Sequence[int], rng: Rng | None, dist: Distribution, dtype=DEFAULT_DTYPE) -> np.ndarray:
    dims = check_shape(shape)
    if isinstance(dist, Constant):
        return np.full(dims, dist.value, dtype=dtype)
    if rng is None:
        raise ValueError("a random distribution needs an Rng")
    if isinstance(dist, Uniform):
        values = rng.uniform(dist.low, dist.high, size=dims)
    elif isinstance(dist, Normal):
        values = rng.normal(dist.mean, dist.std, size=dims)
    else:
        raise TypeError(f"unknown distribution {dist!r}")
    return values.astype(dtype)


def elementwise_apply(t: np.ndarray, f: Callable) -> np.ndarray:
    """Apply ``f`` to every element; ``f`` may be vectorised or scalar-only."""
    t = np.asarray(t)
    otype = t.dtype if t.dtype.kind == "f" else np.dtype(float)
    try:
        with warnings.catch_warnings(), np.errstate(invalid="ignore"):
            warnings.simplefilter("error", DeprecationWarning)
            out = np.array(f(t), dtype=otype)
        if out.shape != t.shape:
            raise ValueError
    except (TypeError, ValueError, DeprecationWarning):
        with np.errstate(invalid="ignore"):
            out = np.vectorize(f, otypes=[otype])(t)
    bad = np.flatnonzero(np.isnan(out))
    if bad.size:
        raise NumericError(f"function produced NaN at flat index {int(bad[0])}")
    return out


def mean_var_over_batch(t: np.ndarray, feature_axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and population variance (divisor m) over every other axis."""
    t = np.asarray(t)
    if t.ndim == 0 or t.shape[0] < 1:
        raise ShapeError("need a batch with at least one element")
    if t.ndim == 1:
        return t.mean(keepdims=True), t.var(keepdims=True)
    axis = feature_axis % t.ndim
    reduce_axes = tuple(i for i in range(t.ndim) if i != axis)
    mean = t.mean(axis=reduce_axes)
    var = t.var(axis=reduce_axes)
    return mean, var
