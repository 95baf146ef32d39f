"""Flat ``key=value`` run configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Mapping

from ..backbone import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    input_size: int = 448
    dim: int = 96
    num_self_blocks: int = 6
    use_energy: bool = True
    drop_path_max: float = 0.2
    head_dropout: float = 0.1
    num_classes: int = 8
    lr: float = 2e-4
    weight_decay: float = 0.08
    warmup_epochs: int = 10
    epochs: int = 200
    batch_size: int = 16
    accum_steps: int = 2
    grad_clip: float = 0.5
    ema_decay: float = 0.9998
    patience: int = 30
    seed: int = 42
    smoothing: float = 0.1
    weight_cap: float = 15.0
    mix_enabled: bool = True
    mixup_alpha: float = 0.3
    cutmix_alpha: float = 1.0

    def __post_init__(self):
        positive = ("lr", "epochs", "batch_size", "accum_steps", "grad_clip", "ema_decay", "patience",
                    "weight_cap", "mixup_alpha", "cutmix_alpha")
        for k in positive:
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive, got {getattr(self, k)}")
        if self.warmup_epochs < 0 or self.weight_decay < 0:
            raise ConfigError("warmup_epochs and weight_decay must be non-negative")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError("smoothing must be in [0, 1)")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in (0, 1)")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_size=self.input_size,
            dim=self.dim,
            num_self_blocks=self.num_self_blocks,
            use_energy=self.use_energy,
            drop_path_max=self.drop_path_max,
            head_dropout=self.head_dropout,
            num_classes=self.num_classes,
        )

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    def with_overrides(self, pairs: Mapping[str, str]) -> "RunConfig":
        return replace(self, **{k: _coerce(k, v) for k, v in pairs.items()})

    @classmethod
    def from_pairs(cls, pairs: Mapping[str, str]) -> "RunConfig":
        return cls().with_overrides(pairs)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls.from_pairs(parse_pairs(text.splitlines()))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(raw, str):
        return raw
    typ = _TYPES[key]
    raw = raw.strip()
    try:
        if typ in ("bool", bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ in ("int", int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_pairs(lines: Iterable[str]) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, _, v = line.partition("=")
        k = k.strip()
        if k not in _TYPES:
            raise ConfigError(f"line {n}: unknown config key {k!r}")
        out[k] = v.strip()
    return out
