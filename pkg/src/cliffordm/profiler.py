"""Parameter and analytic FLOP accounting for Clifford-M.

FLOP convention: convolutions and linear layers cost 2 FLOPs per
multiply-accumulate. Element-wise work is charged per element with the
costs in :data:`ELEMENTWISE_COST`; the rolling interaction is charged its
``3 |S| D H W`` multiplies plus its adds and sigmoids.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Dict, Optional

from .backbone import ModelConfig, build_model
from .blocks import shift_set

PUBLISHED_PARAMS = 851_900
PUBLISHED_PARAMS_NO_ENERGY = 820_000
PUBLISHED_GFLOPS = 3.327

ELEMENTWISE_COST = {
    "bias": 1,  # per output element
    "bn": 2,  # eval-mode scale + shift
    "ln": 7,  # mean, centre, square, mean, scale, affine (2)
    "silu": 4,  # sigmoid (3) + product
    "sigmoid": 3,
    "add": 1,
    "mul": 1,
    "pool": 1,  # per input element
    "resize": 7,  # per output element, two separable 2-tap passes
}


@dataclass
class Profile:
    """Per-component parameter counts and FLOPs (totals are sums)."""

    params: Dict[str, int] = field(default_factory=OrderedDict)
    flops: Dict[str, int] = field(default_factory=OrderedDict)
    detail: Dict[str, int] = field(default_factory=OrderedDict)
    matmul_flops: int = 0
    interaction_mults: int = 0
    input_size: int = 0

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    def table(self) -> str:
        names = list(OrderedDict.fromkeys(list(self.params) + list(self.flops)))
        lines = [f"{'component':<14}{'params':>12}{'MFLOPs':>14}"]
        for n in names:
            lines.append(f"{n:<14}{self.params.get(n, 0):>12,}{self.flops.get(n, 0) / 1e6:>14.3f}")
        lines.append(f"{'total':<14}{self.total_params:>12,}{self.total_flops / 1e6:>14.3f}")
        return "\n".join(lines)


def component_of(path: str) -> str:
    parts = path.split(".")
    if parts[0] in ("stem", "blocks") and len(parts) > 2:
        head = ".".join(parts[:2])
        return head if parts[0] == "blocks" or parts[1] in ("high", "low") else "stem"
    return parts[0]


def count_params(cfg: ModelConfig) -> Profile:
    """Exact trainable-scalar count per component (builds the model once)."""
    prof = Profile(input_size=cfg.input_size)
    for name, p in build_model(cfg, 0).named_parameters():
        comp = component_of(name)
        prof.params[comp] = prof.params.get(comp, 0) + p.data.size
    return prof


class _Tally:
    def __init__(self):
        self.flops: Dict[str, int] = OrderedDict()
        self.detail: Dict[str, int] = OrderedDict()
        self.matmul = 0
        self.mults = 0

    def add(self, comp, key, n):
        self.flops[comp] = self.flops.get(comp, 0) + n
        full = f"{comp}.{key}"
        self.detail[full] = self.detail.get(full, 0) + n

    def conv(self, comp, key, cin, cout, k, groups, h, w, bias=False):
        n = 2 * cout * (cin // groups) * k * k * h * w
        self.matmul += n
        self.add(comp, key, n)
        if bias:
            self.add(comp, key + ".bias", cout * h * w)

    def elem(self, comp, key, per, count):
        self.add(comp, key, per * count)


def _fusion(t: _Tally, comp, D, P):
    t.conv(comp, "fuse.gate", 2 * D, D, 1, 1, P, 1, bias=True)
    c = ELEMENTWISE_COST
    t.elem(comp, "fuse.mix", c["sigmoid"] + c["silu"] + c["mul"] + c["add"] + c["mul"] + c["add"], D * P)


def _interaction(t: _Tally, comp, D, P):
    S = len(shift_set(D))
    mults = 3 * S * D * P
    t.mults += mults
    c = ELEMENTWISE_COST
    # C = v - u, then per shift one wedge subtraction and the SiLU sigmoid
    t.elem(comp, "interact.rolling", 1, mults + D * P + S * D * P + c["sigmoid"] * S * D * P)
    t.conv(comp, "interact.proj", 2 * S * D, D, 1, 1, P, 1, bias=True)


def count_flops(cfg: ModelConfig, input_size: Optional[int] = None) -> Profile:
    """Analytic per-image FLOPs at ``input_size`` (defaults to the config's)."""
    if input_size is not None:
        cfg = replace(cfg, input_size=input_size)
    c = ELEMENTWISE_COST
    D, Wd = cfg.dim, cfg.width
    G = cfg.stem_grid
    gh, gl = cfg.high_grid, cfg.low_grid
    Pg, Ph, Pl = G * G, gh * gh, gl * gl
    t = _Tally()

    t.conv("stem", "conv", 3, Wd, 7, 1, G, G)
    t.elem("stem", "bn_silu", c["bn"] + c["silu"], Wd * Pg)
    for stream, grid in (("stem.high", gh), ("stem.low", gl)):
        t.conv(stream, "proj", Wd, D, 1, 1, G, G)
        t.elem(stream, "proj.bn_silu", c["bn"] + c["silu"], D * Pg)
        t.conv(stream, "dw", D, D, 3, D, G, G)
        t.conv(stream, "pw", D, D, 1, 1, G, G)
        t.elem(stream, "res.bn_silu_add", 2 * (c["bn"] + c["silu"]) + c["add"], D * Pg)
        if grid != G:
            t.elem(stream, "pool", c["pool"], D * Pg)

    t.conv("align", "conv", D, D, 1, 1, gl, gl)
    t.elem("align", "bn", c["bn"], D * Pl)
    t.elem("align", "resize", c["resize"], D * Ph)

    t.elem("cross", "ln", 2 * c["ln"], D * Ph)
    t.conv("cross", "state", D, D, 1, 1, gh, gh, bias=True)
    t.conv("cross", "context_dw", D, D, 3, D, gh, gh)
    t.elem("cross", "context.bn_silu", c["bn"] + c["silu"], D * Ph)
    _interaction(t, "cross", D, Ph)
    _fusion(t, "cross", D, Ph)

    for i in range(cfg.num_self_blocks):
        comp = f"blocks.{i}"
        t.elem(comp, "ln", c["ln"], D * Ph)
        t.conv(comp, "state", D, D, 1, 1, gh, gh, bias=True)
        t.conv(comp, "context_dw1", D, D, 3, D, gh, gh)
        t.conv(comp, "context_dw2", D, D, 3, D, gh, gh)
        t.elem(comp, "context.bn_silu", c["bn"] + c["silu"], D * Ph)
        _interaction(t, comp, D, Ph)
        _fusion(t, comp, D, Ph)

    if cfg.use_energy:
        t.elem("energy", "gap", c["pool"], D * Pl)
        t.elem("energy", "ln", 2 * c["ln"], D * Ph)
        t.conv("energy", "energy_proj", D, D, 1, 1, gh, gh, bias=True)
        t.elem("energy", "silu", c["silu"], D * Ph)
        _fusion(t, "energy", D, Ph)

    t.elem("head", "gap", c["pool"], D * Ph)
    t.elem("head", "ln", c["ln"], D)
    t.conv("head", "fc", D, cfg.num_classes, 1, 1, 1, 1, bias=True)

    return Profile(
        params=OrderedDict(),
        flops=t.flops,
        detail=t.detail,
        matmul_flops=t.matmul,
        interaction_mults=t.mults,
        input_size=cfg.input_size,
    )


def profile(cfg: ModelConfig, input_size: Optional[int] = None) -> Profile:
    """Parameters and FLOPs in one :class:`Profile`."""
    prof = count_flops(cfg, input_size)
    prof.params = count_params(cfg).params
    return prof
