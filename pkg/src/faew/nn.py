"""Parameter containers, initialisers and basic layers."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .tensor import Tensor, add, scalar_mul


class Parameter(Tensor):
    """A learnable tensor tagged with the initialiser that produced it."""

    def __init__(self, data, init: str = "kaiming_uniform", requires_grad: bool = True):
        super().__init__(data)
        self.requires_grad = requires_grad
        self.init = init


class LayerParams(OrderedDict):
    """Ordered name -> tensor mapping; the unit of checkpointing."""

    @property
    def init_spec(self) -> dict:
        return {k: getattr(v, "init", "unknown") for k, v in self.items()}


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    # a = sqrt(5) leaky-relu gain, i.e. U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def make_param(shape, init: str, rng: np.random.Generator, dtype=np.float32, fan_in: int = 1,
               value: float = 0.0, std: float = 0.02, requires_grad: bool = True) -> Parameter:
    if init == "kaiming_uniform":
        data = kaiming_uniform(shape, fan_in, rng)
    elif init == "zeros":
        data = np.zeros(shape)
    elif init == "ones":
        data = np.ones(shape)
    elif init == "constant":
        data = np.full(shape, value)
    elif init.startswith("normal"):
        data = rng.normal(0.0, std, size=shape)
    else:
        raise ConfigError(f"unknown initialiser {init!r}")
    label = f"normal({std})" if init.startswith("normal") else init
    return Parameter(data.astype(dtype), init=label, requires_grad=requires_grad)


class Module:
    """Tree of parameters and sub-modules, discovered in attribute order."""

    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self, trainable_only: bool = False) -> list:
        return [p for _, p in self.named_parameters() if p.requires_grad or not trainable_only]

    def state(self) -> LayerParams:
        return LayerParams(self.named_parameters())

    def load_state(self, params: dict, strict: bool = True) -> None:
        own = self.state()
        if strict:
            missing = [k for k in own if k not in params]
            extra = [k for k in params if k not in own]
            if missing or extra:
                raise ConfigError(f"parameter names differ; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if name not in params:
                continue
            src = params[name]
            data = src.data if isinstance(src, Tensor) else np.asarray(src)
            if data.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {data.shape} != model shape {p.shape}")
            p.data = data.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters(trainable_only))


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, dilation: int = 1, groups: int = 1, bias: bool = True,
                 init: str = "kaiming_uniform", bias_value: float = 0.0, dtype=np.float32):
        if cin % groups or cout % groups:
            raise ConfigError(f"channels {cin}->{cout} not divisible by groups={groups}")
        fan_in = cin // groups * kernel * kernel
        self.weight = make_param((cout, cin // groups, kernel, kernel), init, rng, dtype, fan_in)
        self.bias = None
        if bias:
            self.bias = make_param((cout,), "constant" if bias_value else "zeros", rng, dtype,
                                   value=bias_value)
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, bias: bool = True,
                 init: str = "kaiming_uniform", dtype=np.float32, requires_grad: bool = True):
        self.weight = make_param((fout, fin), init, rng, dtype, fin, requires_grad=requires_grad)
        self.bias = make_param((fout,), "zeros", rng, dtype, requires_grad=requires_grad) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = make_param((dim,), "ones", rng, dtype)
        self.bias = make_param((dim,), "zeros", rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias)


class ConvTranspose(Module):
    """Transposed convolution with kernel == stride."""

    def __init__(self, cin: int, cout: int, scale: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = make_param((cin, cout, scale, scale), "kaiming_uniform", rng, dtype, cin)
        self.bias = make_param((cout,), "zeros", rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose_stride(x, self.weight, self.bias)


@dataclass
class LowRankDelta:
    """Trainable B @ A added to a frozen weight, scaled by ``alpha``."""

    a: Parameter  # r x I
    b: Parameter  # O x r
    rank: int
    alpha: float = 1.0


def lowrank_apply(x: Tensor, base_weight: Tensor, delta: Optional[LowRankDelta],
                  base_bias: Optional[Tensor] = None) -> Tensor:
    """x @ (base_weight + alpha * B @ A).T + base_bias.

    The delta is evaluated as two thin projections, so a zero B contributes an
    exact zero.
    """
    out = ops.linear(x, base_weight, base_bias)
    if delta is None:
        return out
    if delta.rank <= 0:
        raise ConfigError(f"low-rank delta needs rank > 0, got {delta.rank}")
    if delta.a.shape[1] != base_weight.shape[1] or delta.b.shape[0] != base_weight.shape[0]:
        raise DimensionError(
            f"delta A{delta.a.shape} / B{delta.b.shape} do not fit weight {base_weight.shape}")
    low = ops.linear(ops.linear(x, delta.a), delta.b)
    if delta.alpha != 1.0:
        low = scalar_mul(low, delta.alpha)
    return add(out, low)


class LowRankLinear(Module):
    """Linear layer with a frozen base and an optional trainable low-rank delta."""

    def __init__(self, fin: int, fout: int, rng: np.random.Generator, rank: int = 4,
                 alpha: float = 1.0, enabled: bool = True, dtype=np.float32):
        if enabled and rank <= 0:
            raise ConfigError(f"low-rank delta needs rank > 0, got {rank}")
        self.weight = make_param((fout, fin), "kaiming_uniform", rng, dtype, fin, requires_grad=False)
        self.bias = make_param((fout,), "zeros", rng, dtype, requires_grad=False)
        self.rank, self.alpha, self.enabled = rank, alpha, enabled
        if enabled:
            self.lora_a = make_param((rank, fin), "normal", rng, dtype, std=0.02)
            self.lora_b = make_param((fout, rank), "zeros", rng, dtype)

    @property
    def delta(self) -> Optional[LowRankDelta]:
        if not self.enabled:
            return None
        return LowRankDelta(self.lora_a, self.lora_b, self.rank, self.alpha)

    def forward(self, x: Tensor, use_delta: bool = True) -> Tensor:
        return lowrank_apply(x, self.weight, self.delta if use_delta else None, self.bias)
