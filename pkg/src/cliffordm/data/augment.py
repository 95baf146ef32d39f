"""Training augmentation subset and the deterministic validation transform.

Images enter as ``H x W x 3`` arrays (uint8, or float in [0, 1]) and leave as
normalized float32 ``3 x S x S`` tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ..autodiff.ops import interp_matrix

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass(frozen=True)
class AugmentConfig:
    size: int = 448
    scale: Tuple[float, float] = (0.7, 1.0)
    ratio: Tuple[float, float] = (0.85, 1.15)
    hflip: float = 0.5
    vflip: float = 0.3
    max_tries: int = 10


def to_float(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img.astype(np.float32) / np.float32(255.0)
    return img.astype(np.float32, copy=False)


def resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of an ``H x W x C`` float image (half-pixel centers)."""
    H, W = img.shape[:2]
    if (H, W) == (h, w):
        return img
    my = interp_matrix(H, h, np.float32)
    mx = interp_matrix(W, w, np.float32)
    return np.einsum("yh,hwc,xw->yxc", my, img, mx, optimize=True)


def normalize(img: np.ndarray) -> np.ndarray:
    """``(x - mean) / std`` per channel, returned channel-first."""
    return np.ascontiguousarray(((img - IMAGENET_MEAN) / IMAGENET_STD).transpose(2, 0, 1), dtype=np.float32)


def sample_crop(rng: np.random.Generator, H: int, W: int, cfg: AugmentConfig):
    """Draw a crop box ``(top, left, h, w)`` and the target area fraction.

    Falls back to the largest centered box after ``max_tries`` failed draws.
    """
    area = H * W
    log_lo, log_hi = math.log(cfg.ratio[0]), math.log(cfg.ratio[1])
    for _ in range(cfg.max_tries):
        frac = rng.uniform(*cfg.scale)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(frac * area * aspect)))
        h = int(round(math.sqrt(frac * area / aspect)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return (top, left, h, w), frac
    side = min(H, W)
    return ((H - side) // 2, (W - side) // 2, side, side), side * side / area


def augment_train(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    x = to_float(img)
    (top, left, h, w), _ = sample_crop(rng, x.shape[0], x.shape[1], cfg)
    x = resize(x[top : top + h, left : left + w], cfg.size, cfg.size)
    if rng.random() < cfg.hflip:
        x = x[:, ::-1]
    if rng.random() < cfg.vflip:
        x = x[::-1]
    return normalize(x)


def preprocess_eval(img: np.ndarray, size: int) -> np.ndarray:
    """Resize and normalize only; no randomness."""
    return normalize(resize(to_float(img), size, size))
