"""Differentiable operators used by the Clifford-M network.

Every op takes :class:`Tensor` inputs (plus plain arguments), computes the
forward result with numpy and registers a closure returning one gradient per
tensor input.
"""

from __future__ import annotations

import functools
import math
from typing import Optional, Sequence

import numpy as np

from .tensor import ConfigurationError, Tensor, as_tensor, make_result

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-6


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |x|, and faster than expit on float32
    out = np.multiply(x, 0.5, dtype=x.dtype)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def backward(g):
        return (g * (s * (1 + xd * (1 - s))),)

    return make_result(xd * s, (x,), backward, "silu")


# ---------------------------------------------------------------------------
# convolution


def _check_conv(x, w, stride, pad, groups):
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    cin = x.shape[1]
    cout, cpg, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigurationError(f"channels {cin}->{cout} not divisible by groups={groups}")
    if cin // groups != cpg:
        raise ConfigurationError(f"weight expects {cpg} channels per group, input gives {cin // groups}")
    if stride < 1 or pad < 0:
        raise ConfigurationError("stride must be >= 1 and pad >= 0")
    hp, wp = x.shape[2] + 2 * pad, x.shape[3] + 2 * pad
    if kh > hp or kw > wp:
        raise ConfigurationError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _unpad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return x[:, :, pad:-pad, pad:-pad]


def _conv_dense(xd, wd, stride, pad, ho, wo):
    B, C, _, _ = xd.shape
    O, _, kh, kw = wd.shape
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        out = np.matmul(wd.reshape(O, C), xd.reshape(B, C, -1))
        return out.reshape(B, O, ho, wo), None
    xp = _pad(xd, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B, Ho, Wo, C, kh, kw) -> rows of patches
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * ho * wo, C * kh * kw)
    out = cols @ wd.reshape(O, -1).T
    return out.reshape(B, ho, wo, O).transpose(0, 3, 1, 2), cols


def _conv_dense_backward(g, xd, wd, cols, stride, pad, ho, wo):
    B, C, H, W = xd.shape
    O, _, kh, kw = wd.shape
    if cols is None:
        g2 = g.reshape(B, O, -1)
        gw = np.matmul(g2, xd.reshape(B, C, -1).transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        gx = np.matmul(wd.reshape(O, C).T, g2).reshape(xd.shape)
        return gx, gw
    gr = g.transpose(0, 2, 3, 1).reshape(B * ho * wo, O)
    gw = (gr.T @ cols).reshape(wd.shape)
    gcols = (gr @ wd.reshape(O, -1)).reshape(B, ho, wo, C, kh, kw)
    gxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=xd.dtype)
    he, we = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + he : stride, j : j + we : stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return _unpad(gxp, pad), gw


def _conv_depthwise(xd, wd, stride, pad, ho, wo):
    xp = _pad(xd, pad)
    _, _, kh, kw = wd.shape
    he, we = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    out = np.zeros((xd.shape[0], xd.shape[1], ho, wo), dtype=xd.dtype)
    tmp = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            np.multiply(xp[:, :, i : i + he : stride, j : j + we : stride], wd[:, 0, i, j][None, :, None, None], out=tmp)
            out += tmp
    return out


def _conv_depthwise_backward(g, xd, wd, stride, pad, ho, wo):
    xp = _pad(xd, pad)
    _, _, kh, kw = wd.shape
    he, we = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    gxp = np.zeros_like(xp)
    gw = np.empty_like(wd)
    tmp = np.empty_like(g)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + he, stride), slice(j, j + we, stride))
            np.multiply(g, xp[sl], out=tmp)
            gw[:, 0, i, j] = tmp.sum(axis=(0, 2, 3))
            np.multiply(g, wd[:, 0, i, j][None, :, None, None], out=tmp)
            gxp[sl] += tmp
    return _unpad(gxp, pad), gw


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip) with optional grouping.

    ``groups == Cin == Cout`` takes a per-channel tap loop; ``groups == 1``
    lowers to a single matmul over im2col patches.
    """
    ho, wo = _check_conv(x, w, stride, pad, groups)
    xd, wd = x.data, w.data
    cin, cout = x.shape[1], w.shape[0]
    depthwise = groups == cin == cout and groups > 1
    cols = None
    if depthwise:
        out = _conv_depthwise(xd, wd, stride, pad, ho, wo)
    elif groups == 1:
        out, cols = _conv_dense(xd, wd, stride, pad, ho, wo)
    else:
        ci, co = cin // groups, cout // groups
        outs = [
            _conv_dense(xd[:, k * ci : (k + 1) * ci], wd[k * co : (k + 1) * co], stride, pad, ho, wo)[0]
            for k in range(groups)
        ]
        out = np.concatenate(outs, axis=1)
    if b is not None:
        if b.shape != (cout,):
            raise ConfigurationError(f"bias shape {b.shape} does not match {cout} output channels")
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        if depthwise:
            gx, gw = _conv_depthwise_backward(g, xd, wd, stride, pad, ho, wo)
        elif groups == 1:
            gx, gw = _conv_dense_backward(g, xd, wd, cols, stride, pad, ho, wo)
        else:
            ci, co = cin // groups, cout // groups
            parts = [
                _conv_dense_backward(
                    g[:, k * co : (k + 1) * co], xd[:, k * ci : (k + 1) * ci], wd[k * co : (k + 1) * co],
                    _conv_dense(xd[:, k * ci : (k + 1) * ci], wd[k * co : (k + 1) * co], stride, pad, ho, wo)[1],
                    stride, pad, ho, wo,
                )
                for k in range(groups)
            ]
            gx = np.concatenate([p[0] for p in parts], axis=1)
            gw = np.concatenate([p[1] for p in parts], axis=0)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    In training mode the running buffers are updated in place with
    ``running <- (1 - momentum) * running + momentum * batch`` (unbiased
    variance for the running estimate).
    """
    xd = x.data
    C = xd.shape[1]
    shp = (1, C) + (1,) * (xd.ndim - 2)
    axes = (0,) + tuple(range(2, xd.ndim))
    n = xd.size // C
    if training:
        if n < 2:
            raise ConfigurationError("batch_norm in training mode needs more than one value per channel")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(shp)) * inv.reshape(shp)
    gd = gamma.data.reshape(shp)
    out = xhat * gd + beta.data.reshape(shp)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        if training:
            gx = (gd * inv.reshape(shp) / n) * (n * g - gb.reshape(shp) - xhat * gg.reshape(shp))
        else:
            gx = g * (gd * inv.reshape(shp))
        return gx, gg, gb

    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the channel vector (axis 1) at every position, then affine.

    Works for ``B x C`` and ``B x C x H x W`` inputs alike.
    """
    xd = x.data
    C = xd.shape[1]
    if C < 1 or gamma.shape != (C,) or beta.shape != (C,):
        raise ConfigurationError(f"layer norm over {C} channels got affine shapes {gamma.shape}, {beta.shape}")
    shp = (1, C) + (1,) * (xd.ndim - 2)
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data.reshape(shp)
    out = xhat * gd + beta.data.reshape(shp)
    red = (0,) + tuple(range(2, xd.ndim))

    def backward(g):
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# channel / spatial rearrangement


def channel_roll(x: Tensor, s: int) -> Tensor:
    """Cyclic shift toward higher channel index: ``out[:, c] = x[:, (c - s) % D]``."""
    D = x.shape[1]
    if not 0 <= s < D:
        raise ConfigurationError(f"roll shift {s} outside [0, {D})")
    return make_result(np.roll(x.data, s, axis=1), (x,), lambda g: (np.roll(g, -s, axis=1),), "channel_roll", check=False)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]
    return make_result(
        np.concatenate([t.data for t in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        "concat",
        check=False,
    )


@functools.lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for d in range(n_out):
        src = min(max((d + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[d, lo] += 1.0 - frac
        m[d, hi] += frac
    m.flags.writeable = False
    return m


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Bilinear weights (n_out x n_in) with half-pixel centers and edge clamping."""
    return _interp_matrix(n_in, n_out, np.dtype(dtype))


def _apply_separable(xd: np.ndarray, my: np.ndarray, mx: np.ndarray) -> np.ndarray:
    # (Hout x H) @ x @ (W x Wout)
    return np.matmul(np.matmul(my, xd), mx.T)


def bilinear_resize(x: Tensor, h_out: int, w_out: int) -> Tensor:
    if h_out < 1 or w_out < 1:
        raise ConfigurationError("resize target must be at least 1x1")
    H, W = x.shape[2], x.shape[3]
    my = interp_matrix(H, h_out, x.dtype)
    mx = interp_matrix(W, w_out, x.dtype)
    return make_result(
        _apply_separable(x.data, my, mx),
        (x,),
        lambda g: (_apply_separable(g, my.T, mx.T),),
        "bilinear_resize",
    )


def avg_pool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping ``k x k`` mean pooling; extents must divide by ``k``."""
    B, C, H, W = x.shape
    if k < 1 or H % k or W % k:
        raise ConfigurationError(f"avg_pool factor {k} does not divide {H}x{W}")
    if k == 1:
        return x
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))
    inv = 1.0 / (k * k)

    def backward(g):
        return (np.repeat(np.repeat(g * inv, k, axis=2), k, axis=3).astype(x.dtype, copy=False),)

    return make_result(out, (x,), backward, "avg_pool")


def pool_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic averaging matrix; window ``i`` spans ``[round(i*n_in/n_out), round((i+1)*n_in/n_out))``."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = int(math.floor(i * n_in / n_out + 0.5))
        hi = int(math.floor((i + 1) * n_in / n_out + 0.5))
        hi = max(hi, lo + 1)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x: Tensor, h_out: int, w_out: int) -> Tensor:
    """Pool to a fixed grid; exact-factor grids use :func:`avg_pool`."""
    H, W = x.shape[2], x.shape[3]
    if H % h_out == 0 and W % w_out == 0 and H // h_out == W // w_out:
        return avg_pool(x, H // h_out)
    if h_out > H or w_out > W:
        raise ConfigurationError(f"cannot pool {H}x{W} up to {h_out}x{w_out}")
    my = pool_matrix(H, h_out, x.dtype)
    mx = pool_matrix(W, w_out, x.dtype)
    return make_result(
        _apply_separable(x.data, my, mx),
        (x,),
        lambda g: (_apply_separable(g, my.T, mx.T),),
        "adaptive_avg_pool",
    )


def global_avg_pool(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    n = H * W
    return make_result(
        x.data.mean(axis=(2, 3), keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / n, (B, C, H, W)),),
        "global_avg_pool",
    )


def broadcast_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Expand a ``B x C x 1 x 1`` tensor to ``B x C x h x w``."""
    B, C = x.shape[:2]
    return make_result(
        np.ascontiguousarray(np.broadcast_to(x.data, (B, C, h, w))),
        (x,),
        lambda g: (g.sum(axis=(2, 3), keepdims=True),),
        "broadcast_spatial",
        check=False,
    )


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def scale_channels(x: Tensor, gamma: Tensor) -> Tensor:
    """Multiply channel ``c`` of ``x`` by ``gamma[c]``."""
    shp = (1, -1) + (1,) * (x.ndim - 2)
    return x * gamma.reshape(shp)


# ---------------------------------------------------------------------------
# stochastic regularizers


def drop_path(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Per-sample stochastic depth; survivors are rescaled by ``1 / (1 - p)``."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"drop-path rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("training-mode drop-path needs a random generator")
    keep = 1.0 - p
    mask = (rng.random(x.shape[0]) < keep).astype(x.dtype) / x.dtype.type(keep)
    mask = mask.reshape((-1,) + (1,) * (x.ndim - 1))
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "drop_path")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("training-mode dropout needs a random generator")
    keep = 1.0 - p
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape ``B x F`` and ``w`` of shape ``O x F``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ConfigurationError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        if b.shape != (wd.shape[0],):
            raise ConfigurationError(f"linear: bias {b.shape} vs {wd.shape[0]} outputs")
        out = out + b.data

    def backward(g):
        return g @ wd, g.T @ xd, (g.sum(axis=0) if b is not None else None)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, backward, "linear")


__all__ = [
    "sigmoid", "silu", "conv2d", "batch_norm", "layer_norm_channels", "channel_roll", "concat",
    "bilinear_resize", "avg_pool", "adaptive_avg_pool", "global_avg_pool", "broadcast_spatial",
    "flatten", "scale_channels", "drop_path", "dropout", "linear", "interp_matrix", "pool_matrix",
    "as_tensor",
]
