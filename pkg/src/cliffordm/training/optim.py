"""AdamW, warmup + cosine schedule, global-norm clipping and parameter EMA."""

from __future__ import annotations

import logging
import math
from typing import Dict, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float = 2e-4, min_lr: float = 1e-7) -> float:
    """Linear warmup from 0, then cosine decay reaching ``min_lr`` at the last step.

    Steps count optimizer updates, ``0 .. total_steps - 1``.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - 1 - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float = 0.5) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= g.dtype.type(scale)
    return norm


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Decay applies only to parameters flagged ``decay`` (conv/linear weights).
    A step whose gradients contain NaN/Inf is skipped and counted.
    """

    def __init__(self, params: Dict[str, object], weight_decay=0.08, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.skipped = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> bool:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        if not all(np.isfinite(g).all() for g in grads.values()):
            self.skipped += 1
            log.warning("non-finite gradient; optimizer step skipped (%d so far)", self.skipped)
            return False
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if getattr(p, "decay", False) and self.weight_decay:
                p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype, copy=False)
        return True

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out


def ema_update(shadow: Dict[str, np.ndarray], current: Dict[str, np.ndarray], decay: float = 0.9998) -> None:
    """``shadow <- decay * shadow + (1 - decay) * current``, in place."""
    for k, s in shadow.items():
        s *= s.dtype.type(decay)
        s += s.dtype.type(1.0 - decay) * current[k]


class EarlyStopping:
    """Tracks the best validation score; ``update`` returns True when patience runs out."""

    def __init__(self, patience: int = 30):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.since = 0

    def update(self, score: float, epoch: int) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.since = score, epoch, 0
            return False
        self.since += 1
        return self.since >= self.patience
