"""Sparse rolling geometric product and the Clifford interaction blocks.

The interaction between a state ``u`` and a context ``v`` uses the
differential context ``C = v - u``. For each channel shift ``s``::

    wedge_s = u * roll(C, s) - C * roll(u, s)     # antisymmetric
    inner_s = silu(u * roll(C, s))                # symmetric, gated

The ``2 |S|`` feature maps (wedge before inner, shifts ascending) are
projected back to ``D`` channels by a 1x1 convolution. Cost is
``O(|S| D)`` per position instead of the ``O(D^2)`` of a dense product.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .autodiff import ops
from .autodiff.ops import _sigmoid
from .autodiff.tensor import ConfigurationError, Tensor, make_result
from .layers import BatchNorm2d, Conv2d, LayerNorm, LayerScale, Module


def shift_set(D: int) -> list[int]:
    """Channel shifts ``{1, 2, D/4, D/2}``, deduplicated and sorted."""
    if D % 4 or D < 8:
        raise ConfigurationError(f"channel count {D} must be a multiple of 4 and at least 8")
    return sorted({1, 2, D // 4, D // 2})


@dataclass(frozen=True)
class RollingConfig:
    D: int
    shifts: Tuple[int, ...]
    context: str = "differential"
    terms: str = "full"

    @classmethod
    def from_dim(cls, D: int) -> "RollingConfig":
        return cls(D, tuple(shift_set(D)))

    def __post_init__(self):
        if self.context != "differential" or self.terms != "full":
            raise ConfigurationError("only the differential/full interaction mode is supported")
        if len(set(self.shifts)) != len(self.shifts):
            raise ConfigurationError(f"duplicate shifts in {self.shifts}")
        if any(not 1 <= s < self.D for s in self.shifts):
            raise ConfigurationError(f"shifts {self.shifts} must lie in [1, {self.D - 1}]")

    @property
    def width(self) -> int:
        """Channel count of the concatenated interaction features."""
        return 2 * len(self.shifts) * self.D


def rolling_features(u: Tensor, v: Tensor, shifts: Sequence[int]) -> Tensor:
    """Fused wedge/inner feature computation, ``B x 2|S|D x H x W``.

    Equivalent to composing ``channel_roll``, ``mul`` and ``silu`` ops, with a
    single hand-derived backward pass.
    """
    if u.shape != v.shape or u.ndim != 4:
        raise ConfigurationError(f"state {u.shape} and context {v.shape} must be equal 4-D shapes")
    D = u.shape[1]
    if any(not 0 < s < D for s in shifts):
        raise ConfigurationError(f"shifts {list(shifts)} invalid for D={D}")
    ud, cd = u.data, v.data - u.data
    B, _, H, W = ud.shape
    out = np.empty((B, 2 * len(shifts) * D, H, W), dtype=ud.dtype)
    sig = []
    for k, s in enumerate(shifts):
        a = ud * np.roll(cd, s, axis=1)
        out[:, (2 * k) * D : (2 * k + 1) * D] = a - cd * np.roll(ud, s, axis=1)
        sg = _sigmoid(a)
        out[:, (2 * k + 1) * D : (2 * k + 2) * D] = a * sg
        sig.append(sg)

    def backward(g):
        gu = np.zeros_like(ud)
        gc = np.zeros_like(ud)
        for k, s in enumerate(shifts):
            gw = g[:, (2 * k) * D : (2 * k + 1) * D]
            gi = g[:, (2 * k + 1) * D : (2 * k + 2) * D]
            rc = np.roll(cd, s, axis=1)
            a = ud * rc
            sg = sig[k]
            ga = gw + gi * (sg * (1 + a * (1 - sg)))
            gu += ga * rc
            gc += np.roll(ga * ud, -s, axis=1)
            gc -= gw * np.roll(ud, s, axis=1)
            gu -= np.roll(gw * cd, -s, axis=1)
        # C = v - u
        return gu - gc, gc

    return make_result(out, (u, v), backward, "rolling_features")


def rolling_features_composed(u: Tensor, v: Tensor, shifts: Sequence[int]) -> Tensor:
    """Same features built from generic ops; used to cross-check the fused kernel."""
    c = v - u
    parts = []
    for s in shifts:
        a = u * ops.channel_roll(c, s)
        parts.append(a - c * ops.channel_roll(u, s))
        parts.append(ops.silu(a))
    return ops.concat(parts, axis=1)


def rolling_features_naive(u: np.ndarray, v: np.ndarray, shifts: Sequence[int], count: bool = False):
    """Scalar-loop reference. With ``count=True`` also returns the multiply count.

    Each (shift, channel, position) costs three multiplies: ``u*roll(C)``,
    ``C*roll(u)`` and the ``x*sigmoid(x)`` of the SiLU.
    """
    B, D, H, W = u.shape
    n = len(shifts)
    out = np.zeros((B, 2 * n * D, H, W), dtype=u.dtype)
    mults = 0
    for b in range(B):
        for k, s in enumerate(shifts):
            for c in range(D):
                src = (c - s) % D
                for h in range(H):
                    for w in range(W):
                        uc = u[b, c, h, w]
                        cc = v[b, c, h, w] - uc
                        us = u[b, src, h, w]
                        cs = v[b, src, h, w] - us
                        a = uc * cs
                        out[b, 2 * k * D + c, h, w] = a - cc * us
                        out[b, (2 * k + 1) * D + c, h, w] = a / (1.0 + np.exp(-a))
                        mults += 3
    return (out, mults) if count else out


class SparseRollingProduct(Module):
    """Rolling interaction followed by the ``2|S|D -> D`` projection."""

    def __init__(self, rng, cfg: RollingConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.proj = Conv2d(rng, cfg.width, cfg.D, 1, dtype=dtype)

    def forward(self, u: Tensor, v: Tensor) -> Tensor:
        if u.shape[1] != self.cfg.D:
            raise ConfigurationError(f"expected {self.cfg.D} channels, got {u.shape[1]}")
        return self.proj(rolling_features(u, v, self.cfg.shifts))


class GatedResidualFusion(Module):
    """``X_in + DropPath(gamma * (SiLU(X_ref) + sigmoid(gate([X_ref, G])) * G))``."""

    def __init__(self, rng, D: int, drop_path: float = 0.0, init_scale: float = 1e-5, dtype=np.float32):
        super().__init__()
        if not 0.0 <= drop_path < 1.0:
            raise ConfigurationError(f"drop-path rate {drop_path} outside [0, 1)")
        self.gate = Conv2d(rng, 2 * D, D, 1, dtype=dtype)
        self.scale = LayerScale(D, init_scale, dtype=dtype)
        self.drop_path = drop_path

    def mix(self, x_ref: Tensor, g_feat: Tensor) -> Tensor:
        alpha = ops.sigmoid(self.gate(ops.concat([x_ref, g_feat], axis=1)))
        return ops.silu(x_ref) + alpha * g_feat

    def forward(self, x_in: Tensor, x_ref: Tensor, g_feat: Tensor, rng=None) -> Tensor:
        h_mix = self.mix(x_ref, g_feat)
        return x_in + ops.drop_path(self.scale(h_mix), self.drop_path, rng, self.training)


class CliffordCrossBlock(Module):
    """Fuse the high-resolution stream with the aligned low-resolution stream."""

    def __init__(self, rng, D: int, drop_path: float = 0.0, dtype=np.float32):
        super().__init__()
        cfg = RollingConfig.from_dim(D)
        self.norm_h = LayerNorm(D, dtype)
        self.norm_l = LayerNorm(D, dtype)
        self.state = Conv2d(rng, D, D, 1, dtype=dtype)
        self.context_dw = Conv2d(rng, D, D, 3, pad=1, groups=D, bias=False, dtype=dtype)
        self.context_bn = BatchNorm2d(D, dtype)
        self.interact = SparseRollingProduct(rng, cfg, dtype)
        self.fuse = GatedResidualFusion(rng, D, drop_path, dtype=dtype)

    def forward(self, x_h: Tensor, x_l_up: Tensor, rng=None) -> Tensor:
        if x_h.shape != x_l_up.shape:
            raise ConfigurationError(f"cross block inputs differ: {x_h.shape} vs {x_l_up.shape}")
        xh_hat = self.norm_h(x_h)
        xl_hat = self.norm_l(x_l_up)
        u = self.state(xh_hat)
        v = ops.silu(self.context_bn(self.context_dw(xl_hat)))
        return self.fuse(x_h, xh_hat, self.interact(u, v), rng)


class CliffordSelfBlock(Module):
    """Self refinement; context from two stacked depthwise 3x3 convs (5x5 field)."""

    def __init__(self, rng, D: int, drop_path: float = 0.0, dtype=np.float32):
        super().__init__()
        cfg = RollingConfig.from_dim(D)
        self.norm = LayerNorm(D, dtype)
        self.state = Conv2d(rng, D, D, 1, dtype=dtype)
        self.context_dw1 = Conv2d(rng, D, D, 3, pad=1, groups=D, bias=False, dtype=dtype)
        self.context_dw2 = Conv2d(rng, D, D, 3, pad=1, groups=D, bias=False, dtype=dtype)
        self.context_bn = BatchNorm2d(D, dtype)
        self.interact = SparseRollingProduct(rng, cfg, dtype)
        self.fuse = GatedResidualFusion(rng, D, drop_path, dtype=dtype)

    def context(self, z_hat: Tensor) -> Tensor:
        return ops.silu(self.context_bn(self.context_dw2(self.context_dw1(z_hat))))

    def forward(self, z: Tensor, rng=None) -> Tensor:
        if z.shape[1] != self.norm.weight.shape[0]:
            raise ConfigurationError(f"self block expects {self.norm.weight.shape[0]} channels, got {z.shape[1]}")
        z_hat = self.norm(z)
        u = self.state(z_hat)
        return self.fuse(z, z_hat, self.interact(u, self.context(z_hat)), rng)


class EnergyBaseGFFN(Module):
    """Gate the fused map with a pooled descriptor of the low-resolution stream."""

    def __init__(self, rng, D: int, drop_path: float = 0.0, dtype=np.float32):
        super().__init__()
        self.norm_f = LayerNorm(D, dtype)
        self.norm_e = LayerNorm(D, dtype)
        self.energy_proj = Conv2d(rng, D, D, 1, dtype=dtype)
        self.fuse = GatedResidualFusion(rng, D, drop_path, dtype=dtype)

    def energy(self, x_l: Tensor, h: int, w: int) -> Tensor:
        return ops.broadcast_spatial(ops.global_avg_pool(x_l), h, w)

    def forward(self, f_fused: Tensor, x_l: Tensor, rng=None) -> Tensor:
        if f_fused.shape[1] != x_l.shape[1]:
            raise ConfigurationError(f"channel mismatch {f_fused.shape[1]} vs {x_l.shape[1]}")
        e = self.energy(x_l, f_fused.shape[2], f_fused.shape[3])
        f_hat = self.norm_f(f_fused)
        t = ops.silu(self.energy_proj(self.norm_e(e)))
        # same gate/residual pattern as the interaction blocks, with T as the gated term
        return self.fuse(f_fused, f_hat, t, rng)


def set_layer_scales(module: Module, value: float) -> None:
    """Overwrite every layer-scale vector (``value=0`` makes blocks identities)."""
    for name, p in module.named_parameters():
        if name.endswith("scale.gamma"):
            p.data[...] = value


def layer_scale_parameters(module: Module):
    return [p for name, p in module.named_parameters() if name.endswith("scale.gamma")]


__all__ = [
    "shift_set", "RollingConfig", "rolling_features", "rolling_features_composed",
    "rolling_features_naive", "SparseRollingProduct", "GatedResidualFusion", "CliffordCrossBlock",
    "CliffordSelfBlock", "EnergyBaseGFFN", "set_layer_scales", "layer_scale_parameters",
]
