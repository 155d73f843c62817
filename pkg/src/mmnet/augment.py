"""Seeded image augmentation: rescale, shift, shear, zoom, flip with nearest fill.

Geometry is applied as one inverse-mapped affine warp with nearest-neighbour
sampling. Out-of-range source coordinates are clamped to the border, which
repeats the closest pixel and never introduces new values.

Zoom follows the "less than one magnifies" convention: ``zoom=0.5`` samples
the central half of the image and blows it up to full size.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ValidationError
from .tensor import Rng

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class AugmentConfig:
    rescale_factor: float = 1.0 / 255.0
    width_shift_range: float = 0.2
    height_shift_range: float = 0.2
    shear_degrees: float = 10.0
    zoom_range: tuple[float, float] = (0.8, 1.2)
    horizontal_flip: bool = True
    vertical_flip: bool = False
    fill_mode: str = "nearest"
    seed: int = 0

    def __post_init__(self):
        for name in ("width_shift_range", "height_shift_range"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")
        if self.shear_degrees < 0:
            raise ConfigError("shear_degrees must be non-negative")
        lo, hi = self.zoom_range
        if not (0 < lo <= hi):
            raise ConfigError(f"zoom_range must satisfy 0 < low <= high, got {self.zoom_range}")
        if self.fill_mode != "nearest":
            raise ConfigError(f"unsupported fill mode {self.fill_mode!r}")
        object.__setattr__(self, "zoom_range", (float(lo), float(hi)))

    @classmethod
    def identity(cls, **kw) -> "AugmentConfig":
        """No geometric change at all; only the rescale remains."""
        base = dict(width_shift_range=0.0, height_shift_range=0.0, shear_degrees=0.0, zoom_range=(1.0, 1.0), horizontal_flip=False, vertical_flip=False)
        base.update(kw)
        return cls(**base)


@dataclass
class ImageSample:
    pixels: np.ndarray
    label: int


@dataclass(frozen=True)
class AugmentParams:
    shift_x: float
    shift_y: float
    shear_deg: float
    zoom: float
    flip_h: bool
    flip_v: bool


def rescale(raw: np.ndarray, factor: float = 1.0 / 255.0) -> np.ndarray:
    raw = np.asarray(raw)
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise ValidationError(f"raw pixel values must lie in [0, 255], got [{raw.min()}, {raw.max()}]")
    out = raw.astype(np.float32) * np.float32(factor)
    if out.size and out.max() > 1.0:
        raise ValidationError(f"rescale factor {factor} maps pixels above 1")
    return out


def _nearest(coord: np.ndarray, size: int) -> np.ndarray:
    return np.clip(np.floor(coord + 0.5), 0, size - 1).astype(np.intp)


def affine_transform(img: np.ndarray, shift_x: float = 0.0, shift_y: float = 0.0, shear_deg: float = 0.0, zoom: float = 1.0) -> np.ndarray:
    """Shift (pixels, positive = right/down), then shear about the centre, then zoom."""
    if not zoom > 0:
        raise ValidationError(f"zoom must be positive, got {zoom}")
    h, w = img.shape[:2]
    if h != w:
        raise ValidationError(f"affine_transform expects a square image, got {h}x{w}")
    if shift_x == 0 and shift_y == 0 and shear_deg == 0 and zoom == 1:
        return img.copy()
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    # undo zoom, then shear, then shift
    y = zoom * (rows - cy)
    x = zoom * (cols - cx)
    x = x - math.tan(math.radians(shear_deg)) * y
    src_r = _nearest(y + cy - shift_y, h)
    src_c = _nearest(x + cx - shift_x, w)
    return img[src_r, src_c]


def flip(img: np.ndarray, axis: str) -> np.ndarray:
    if axis == "horizontal":
        return img[:, ::-1].copy()
    if axis == "vertical":
        return img[::-1].copy()
    raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")


def draw_params(rng: Rng, cfg: AugmentConfig, height: int, width: int) -> AugmentParams:
    # a fixed number of draws per sample keeps streams aligned across configs
    u = rng.uniform(-1.0, 1.0, 3)
    z = rng.uniform(0.0, 1.0)
    coins = rng.random(2)
    lo, hi = cfg.zoom_range
    return AugmentParams(
        shift_x=float(u[0] * cfg.width_shift_range * width),
        shift_y=float(u[1] * cfg.height_shift_range * height),
        shear_deg=float(u[2] * cfg.shear_degrees),
        zoom=float(lo + (hi - lo) * z),
        flip_h=bool(cfg.horizontal_flip and coins[0] < 0.5),
        flip_v=bool(cfg.vertical_flip and coins[1] < 0.5),
    )


def apply_params(img: np.ndarray, p: AugmentParams) -> np.ndarray:
    out = affine_transform(img, p.shift_x, p.shift_y, p.shear_deg, p.zoom)
    if p.flip_h:
        out = flip(out, "horizontal")
    if p.flip_v:
        out = flip(out, "vertical")
    return out


def augment_one(raw: np.ndarray, index: int, cfg: AugmentConfig) -> np.ndarray:
    """Augment the ``index``-th sample of a batch; its stream depends only on (seed, index)."""
    img = rescale(raw, cfg.rescale_factor)
    p = draw_params(Rng(cfg.seed).child(index), cfg, img.shape[0], img.shape[1])
    return apply_params(img, p)


def augment_batch(samples: Sequence[ImageSample], cfg: AugmentConfig, workers: int = 1) -> list[ImageSample]:
    def one(i: int) -> ImageSample:
        s = samples[i]
        return ImageSample(augment_one(s.pixels, i, cfg), s.label)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, range(len(samples))))
    return [one(i) for i in range(len(samples))]


def epoch_augmenter(cfg: AugmentConfig, already_rescaled: bool = True):
    """Callable ``(epoch, images) -> images`` for :func:`mmnet.training.train_head`."""

    def run(epoch: int, images: np.ndarray) -> np.ndarray:
        c = replace(cfg, seed=(cfg.seed * 1_000_003 + epoch) & 0xFFFFFFFFFFFFFFFF)
        if already_rescaled:
            c = replace(c, rescale_factor=1.0)
        return np.stack([augment_one(img, i, c) for i, img in enumerate(images)])

    return run


# -- image files -------------------------------------------------------------


def scan_image_tree(root) -> list[tuple[Path, str]]:
    """``<root>/<class>/<image>`` pairs in sorted order."""
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"image root {root} is not a directory")
    out = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for img in sorted(class_dir.iterdir()):
            if img.suffix.lower() in IMAGE_SUFFIXES:
                out.append((img, class_dir.name))
    return out


def load_image(path, size: int) -> np.ndarray:
    """Raw 0-255 float32 RGB array resized to ``size`` x ``size``."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32)


def save_image(path, pixels: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
