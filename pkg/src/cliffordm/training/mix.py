"""Batch-level MixUp / CutMix, exactly one of the two per batch."""

from __future__ import annotations

import logging
import math
from typing import Optional, Tuple

import numpy as np

log = logging.getLogger(__name__)


def cut_box(H: int, W: int, lam: float, rng: np.random.Generator) -> Tuple[int, int, int, int]:
    """Rectangle of roughly ``(1 - lam)`` of the image, clipped to its bounds."""
    ratio = math.sqrt(1.0 - lam)
    ch, cw = int(H * ratio), int(W * ratio)
    cy, cx = int(rng.integers(H)), int(rng.integers(W))
    y0, y1 = max(cy - ch // 2, 0), min(cy + ch // 2, H)
    x0, x1 = max(cx - cw // 2, 0), min(cx + cw // 2, W)
    return y0, y1, x0, x1


def mix_batch(
    images: np.ndarray,
    targets: np.ndarray,
    rng: np.random.Generator,
    mixup_alpha: float = 0.3,
    cutmix_alpha: float = 1.0,
    lam: Optional[float] = None,
    branch: Optional[str] = None,
):
    """Blend a ``B x 3 x H x W`` batch with a permutation of itself.

    Returns ``(images, targets, tag)`` with tag ``"mixup"``, ``"cutmix"`` or
    ``"none"`` (batches of one pass through). ``lam`` and ``branch`` force the
    random draws.
    """
    B = len(images)
    if B < 2:
        log.warning("mix_batch: batch of %d left unmixed", B)
        return images, targets, "none"
    if branch is None:
        branch = "mixup" if rng.random() < 0.5 else "cutmix"
    perm = rng.permutation(B)
    if branch == "mixup":
        lam = float(rng.beta(mixup_alpha, mixup_alpha)) if lam is None else lam
        x = lam * images + (1 - lam) * images[perm]
        y = lam * targets + (1 - lam) * targets[perm]
        return x.astype(images.dtype, copy=False), y, "mixup"
    if branch != "cutmix":
        raise ValueError(f"unknown mix branch {branch!r}")
    lam = float(rng.beta(cutmix_alpha, cutmix_alpha)) if lam is None else lam
    H, W = images.shape[2:]
    y0, y1, x0, x1 = cut_box(H, W, lam, rng)
    x = images.copy()
    x[:, :, y0:y1, x0:x1] = images[perm][:, :, y0:y1, x0:x1]
    realized = 1.0 - (y1 - y0) * (x1 - x0) / (H * W)
    y = realized * targets + (1 - realized) * targets[perm]
    return x, y, "cutmix"
