"""Procedural texture datasets standing in for the fish photographs.

Each class is a sinusoidal grating with its own orientation, spatial frequency
and colour tint; every image gets a random phase, a small orientation jitter
and additive noise. Images are float32 in [0, 1], shape (N, H, W, 3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Rng


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if not self.class_names:
            self.class_names = [f"class_{i}" for i in range(int(self.labels.max()) + 1 if len(self.labels) else 0)]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def take(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names))


def texture_dataset(
    num_classes: int = 10,
    per_class: int = 200,
    size: int = 32,
    seed: int = 0,
    noise: float = 0.08,
) -> Dataset:
    rng = Rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    class_rng = rng.child(0)
    # spread orientations and frequencies so neighbouring classes differ in both
    thetas = np.pi * np.arange(num_classes) / num_classes
    freqs = 2.0 + 4.0 * class_rng.permutation(num_classes) / max(1, num_classes - 1)
    tints = 0.35 + 0.65 * class_rng.random((num_classes, 3))

    images = np.empty((num_classes * per_class, size, size, 3), np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, c in enumerate(labels):
        r = rng.child(i + 1)
        theta = thetas[c] + r.normal(0.0, 0.05)
        phase = r.uniform(0.0, 2 * np.pi)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * freqs[c] * u + phase)
        img = wave[..., None] * tints[c] + r.normal(0.0, noise, (size, size, 3))
        images[i] = np.clip(img, 0.0, 1.0)
    names = [f"texture_{c:02d}" for c in range(num_classes)]
    return Dataset(images, labels, names)


def separable_embeddings(num_classes: int = 3, per_class: int = 30, dim: int = 16, seed: int = 0, spread: float = 0.3) -> Dataset:
    """Gaussian blobs around well-separated class means, shaped (N, 1, 1, dim)."""
    rng = Rng(seed)
    means = rng.normal(0.0, 3.0, (num_classes, dim))
    labels = np.repeat(np.arange(num_classes), per_class)
    x = means[labels] + rng.normal(0.0, spread, (len(labels), dim))
    return Dataset(x.reshape(len(labels), 1, 1, dim).astype(np.float32), labels)
