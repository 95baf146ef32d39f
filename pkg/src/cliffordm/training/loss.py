"""Weighted, label-smoothed binary cross-entropy on clamped logits."""

from __future__ import annotations

import numpy as np

from ..autodiff.ops import _sigmoid
from ..autodiff.tensor import NumericError, Tensor, make_result


def class_weights(labels, cap: float = 15.0) -> np.ndarray:
    """Positive-class weights ``min((N - n_pos) / max(n_pos, 1), cap)``."""
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError("class_weights needs an N x C label matrix with N >= 1")
    n = y.shape[0]
    pos = y.sum(axis=0)
    return np.minimum((n - pos) / np.maximum(pos, 1.0), cap)


def smooth_targets(y, eps: float = 0.1) -> np.ndarray:
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {eps}")
    return (1.0 - eps) * np.asarray(y) + 0.5 * eps


def _softplus(x):
    return np.logaddexp(0.0, x)


def weighted_bce(z: Tensor, y: np.ndarray, w: np.ndarray, clamp: float = 20.0) -> Tensor:
    """Mean over samples of the per-sample class-mean weighted BCE.

    Logits are hard-clamped to ``[-clamp, clamp]``; the gradient is zero for
    logits outside that interval. ``y`` are the (already smoothed) targets
    and ``w`` the positive-class weights.
    """
    zd = z.data
    if not np.isfinite(zd).all():
        raise NumericError("weighted_bce: non-finite logits")
    y = np.asarray(y, dtype=zd.dtype)
    w = np.asarray(w, dtype=zd.dtype).reshape(1, -1)
    if y.shape != zd.shape or w.shape[1] != zd.shape[1]:
        raise ValueError(f"logits {zd.shape}, targets {y.shape}, weights {w.shape} disagree")
    zc = np.clip(zd, -clamp, clamp)
    # -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    per = w * y * _softplus(-zc) + (1 - y) * _softplus(zc)
    loss = np.asarray(per.mean(axis=1).mean(), dtype=zd.dtype)
    inside = (np.abs(zd) <= clamp).astype(zd.dtype)
    n = zd.size

    def backward(g):
        s = _sigmoid(zc)
        dz = (-w * y * (1 - s) + (1 - y) * s) * inside / n
        return (g * dz,)

    return make_result(loss, (z,), backward, "weighted_bce")
