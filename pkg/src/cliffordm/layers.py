"""Parameter containers and the small set of layers Clifford-M is built from."""

from __future__ import annotations

import math
from typing import Dict, Iterator, Tuple

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor


class Parameter(Tensor):
    """Trainable leaf tensor. ``decay`` marks it for decoupled weight decay."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = False):
        super().__init__(np.asarray(data), requires_grad=True)
        self.decay = decay


class Module:
    """Minimal parameter tree with train/eval mode and stable path names."""

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (f64 for verification)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        for name in getattr(self, "_buffers", ()):
            setattr(self, name, getattr(self, name).astype(dtype))
        for _, child in self.children():
            child._cast_buffers(dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k=1, stride=1, pad=0, groups=1, bias=True, dtype=np.float32):
        super().__init__()
        fan_in = (cin // groups) * k * k
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin // groups, k, k), fan_in, dtype), decay=True)
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None
        self.stride, self.pad, self.groups = stride, pad, groups

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(np.ones(c, dtype=dtype))
        self.bias = Parameter(np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var, self.training)


class LayerNorm(Module):
    """Channel-wise layer norm (axis 1) for feature maps or pooled vectors."""

    def __init__(self, c, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(np.ones(c, dtype=dtype))
        self.bias = Parameter(np.zeros(c, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm_channels(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, rng, fin, fout, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(kaiming_uniform(rng, (fout, fin), fin, dtype), decay=True)
        self.bias = Parameter(np.zeros(fout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerScale(Module):
    def __init__(self, c, init=1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Parameter(np.full(c, init, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.scale_channels(x, self.gamma)


def conv_bn_silu(x: Tensor, conv: Conv2d, bn: BatchNorm2d, act: bool = True) -> Tensor:
    y = bn(conv(x))
    return ops.silu(y) if act else y

