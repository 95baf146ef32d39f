"""Dual-resolution Clifford-M backbone and classification head."""

from __future__ import annotations

import io
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ConfigurationError, Tensor, no_grad
from .blocks import CliffordCrossBlock, CliffordSelfBlock, EnergyBaseGFFN
from .data.cmt import decode, encode
from .layers import BatchNorm2d, Conv2d, LayerNorm, Linear, Module, conv_bn_silu


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 448
    dim: int = 96
    stem_width: Optional[int] = None  # None -> 2 * dim
    num_self_blocks: int = 6
    use_energy: bool = True
    drop_path_max: float = 0.2
    head_dropout: float = 0.1
    num_classes: int = 8
    high_grid: int = 28
    low_grid: int = 14

    def __post_init__(self):
        if self.input_size % 16 or self.input_size < 16:
            raise ConfigurationError(f"input_size {self.input_size} must be a positive multiple of 16")
        if self.dim % 4 or self.dim < 8:
            raise ConfigurationError(f"dim {self.dim} must be a multiple of 4 and at least 8")
        if self.num_self_blocks < 1:
            raise ConfigurationError("num_self_blocks must be >= 1")
        if not 0.0 <= self.drop_path_max < 1.0 or not 0.0 <= self.head_dropout < 1.0:
            raise ConfigurationError("drop rates must lie in [0, 1)")
        if self.stem_grid < self.high_grid or self.high_grid < self.low_grid:
            raise ConfigurationError(
                f"stem grid {self.stem_grid} cannot be pooled to {self.high_grid}/{self.low_grid}"
            )

    @property
    def width(self) -> int:
        return self.stem_width if self.stem_width is not None else 2 * self.dim

    @property
    def stem_grid(self) -> int:
        return self.input_size // 4

    def drop_path_rates(self) -> list[float]:
        """Linear stochastic-depth ramp over the self blocks, inclusive endpoints."""
        n = self.num_self_blocks
        if n == 1:
            return [0.0]
        return [self.drop_path_max * i / (n - 1) for i in range(n)]

    def to_text(self) -> str:
        return "".join(f"{k}={'' if v is None else v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, _, v = line.partition("=")
            if k not in types:
                raise ConfigurationError(f"unknown model config key {k!r}")
            kw[k] = _parse_value(k, v)
        return cls(**kw)


def _parse_value(key: str, v: str):
    if key == "stem_width":
        return int(v) if v else None
    if key == "use_energy":
        if v.lower() not in ("true", "false", "1", "0"):
            raise ConfigurationError(f"{key} must be a boolean, got {v!r}")
        return v.lower() in ("true", "1")
    if key in ("drop_path_max", "head_dropout"):
        return float(v)
    return int(v)


class StemStream(Module):
    """1x1 projection plus a depthwise-separable residual refinement."""

    def __init__(self, rng, cin, D, dtype):
        super().__init__()
        self.proj = Conv2d(rng, cin, D, 1, bias=False, dtype=dtype)
        self.proj_bn = BatchNorm2d(D, dtype)
        self.dw = Conv2d(rng, D, D, 3, pad=1, groups=D, bias=False, dtype=dtype)
        self.dw_bn = BatchNorm2d(D, dtype)
        self.pw = Conv2d(rng, D, D, 1, bias=False, dtype=dtype)
        self.pw_bn = BatchNorm2d(D, dtype)

    def forward(self, f: Tensor) -> Tensor:
        x0 = conv_bn_silu(f, self.proj, self.proj_bn)
        return x0 + conv_bn_silu(conv_bn_silu(x0, self.dw, self.dw_bn), self.pw, self.pw_bn)


class SimpleStem(Module):
    def __init__(self, rng, cfg: ModelConfig, dtype):
        super().__init__()
        self.cfg = cfg
        self.conv = Conv2d(rng, 3, cfg.width, 7, stride=4, pad=3, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(cfg.width, dtype)
        self.high = StemStream(rng, cfg.width, cfg.dim, dtype)
        self.low = StemStream(rng, cfg.width, cfg.dim, dtype)

    def forward(self, img: Tensor) -> Tuple[Tensor, Tensor]:
        if img.ndim != 4 or img.shape[1] != 3:
            raise ConfigurationError(f"expected B x 3 x S x S images, got {img.shape}")
        if img.shape[2] != self.cfg.input_size or img.shape[3] != self.cfg.input_size:
            raise ConfigurationError(f"image size {img.shape[2:]} != configured {self.cfg.input_size}")
        f = conv_bn_silu(img, self.conv, self.bn)
        g_h, g_l = self.cfg.high_grid, self.cfg.low_grid
        x_h = ops.adaptive_avg_pool(self.high(f), g_h, g_h)
        x_l = ops.adaptive_avg_pool(self.low(f), g_l, g_l)
        return x_h, x_l


class LowToHighAlign(Module):
    """1x1 conv, BN, then bilinear resize onto the high-resolution grid."""

    def __init__(self, rng, D, grid, dtype):
        super().__init__()
        self.conv = Conv2d(rng, D, D, 1, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(D, dtype)
        self.grid = grid

    def forward(self, x_l: Tensor) -> Tensor:
        return ops.bilinear_resize(self.bn(self.conv(x_l)), self.grid, self.grid)


class ClassifierHead(Module):
    def __init__(self, rng, D, num_classes, dropout, dtype):
        super().__init__()
        self.norm = LayerNorm(D, dtype)
        self.fc = Linear(rng, D, num_classes, dtype)
        self.dropout = dropout

    def features(self, f: Tensor) -> Tensor:
        return self.norm(ops.flatten(ops.global_avg_pool(f)))

    def forward(self, f: Tensor, rng=None) -> Tensor:
        return self.fc(ops.dropout(self.features(f), self.dropout, rng, self.training))


class CliffordM(Module):
    """Full network: stem, cross-scale fusion, self blocks, energy gate, head.

    ``forward`` returns raw logits of shape ``B x num_classes``.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        D = cfg.dim
        self.stem = SimpleStem(rng, cfg, dtype)
        self.align = LowToHighAlign(rng, D, cfg.high_grid, dtype)
        self.cross = CliffordCrossBlock(rng, D, 0.0, dtype)
        self.blocks = [CliffordSelfBlock(rng, D, p, dtype) for p in cfg.drop_path_rates()]
        self.energy = EnergyBaseGFFN(rng, D, cfg.drop_path_max, dtype) if cfg.use_energy else None
        self.head = ClassifierHead(rng, D, cfg.num_classes, cfg.head_dropout, dtype)

    def forward_features(self, img: Tensor, rng=None) -> Tensor:
        x_h, x_l = self.stem(img)
        z = self.cross(x_h, self.align(x_l), rng)
        for blk in self.blocks:
            z = blk(z, rng)
        if self.energy is not None:
            z = self.energy(z, x_l, rng)
        return z

    def forward(self, img, rng=None) -> Tensor:
        if not isinstance(img, Tensor):
            img = Tensor(np.asarray(img, dtype=self.dtype))
        return self.head(self.forward_features(img, rng), rng)

    @property
    def dtype(self):
        return self.head.fc.weight.dtype

    def predict_logits(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Eval-mode logits for a stack of normalized ``N x 3 x S x S`` images."""
        was = self.training
        self.eval()
        try:
            with no_grad():
                out = [self.forward(images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
        finally:
            self.train(was)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.cfg.num_classes), self.dtype)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> CliffordM:
    """Deterministic initialization from ``seed``."""
    return CliffordM(cfg, np.random.default_rng(seed), dtype)


def model_forward(img, model: CliffordM, training: bool = False, rng=None) -> Tensor:
    model.train(training)
    return model(img, rng)


# ---------------------------------------------------------------------------
# checkpoint archive

_CONFIG_ENTRY = "model_config.txt"
_STAMP = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, model: CliffordM, extra: Optional[Dict[str, str]] = None,
                    state: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Zip archive of ``<param path>.cmt`` records plus the model config text.

    ``state`` overrides the arrays written (e.g. EMA weights).
    """
    state = model.state_dict() if state is None else state
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo(_CONFIG_ENTRY, _STAMP), model.cfg.to_text())
        if extra:
            body = "".join(f"{k}={v}\n" for k, v in sorted(extra.items()))
            zf.writestr(zipfile.ZipInfo("meta.txt", _STAMP), body)
        for name in sorted(state):
            zf.writestr(zipfile.ZipInfo(name + ".cmt", _STAMP), encode(state[name]))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Tuple[CliffordM, Dict[str, str]]:
    with zipfile.ZipFile(path) as zf:
        cfg = ModelConfig.from_text(zf.read(_CONFIG_ENTRY).decode())
        state = {n[:-4]: decode(zf.read(n)) for n in zf.namelist() if n.endswith(".cmt")}
        meta = {}
        if "meta.txt" in zf.namelist():
            for line in zf.read("meta.txt").decode().splitlines():
                k, _, v = line.partition("=")
                meta[k] = v
    dtype = next(iter(state.values())).dtype if state else np.float32
    model = build_model(cfg, 0, dtype)
    model.load_state_dict(state)
    return model, meta
