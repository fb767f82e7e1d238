"""
Distribution-aware Fourier aggregated adapter.

Token path (N x L x C on an h x w grid)::

    F'a  = Conv1x1(F_a)
    F_dc = Conv1x1(sigmoid(Conv1d(stats(F'a))) * F'a)
    F_df = Re DFT_L DFT_C (F'a)
    F'd  = GConv3x3(F_dc + F_df)
    F_p  = avgpool(F'd) + maxpool(F'd)
    F_l  = concat(Linear_i(F_p) for each branch)
    H_a  = Conv1x1(sigmoid(Linear(F_l)) * F'd)
    out  = tokens + H_a

The output projection starts at zero, so a fresh adapter is an exact identity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Linear, Module, make_param
from .tensor import (Tensor, abs_, add, concat, mean, mul, reshape, sigmoid, sqrt,
                     std)

SPECTRAL_MODES = ("real", "imag", "amplitude", "off")


@dataclass
class DafaConfig:
    channels: int = 64
    branches: int = 4
    groups: int = 4
    conv1d_kernel: int = 3
    spectral_mode: str = "real"

    def validate(self) -> None:
        c = self.channels
        if c % self.groups or c % self.branches:
            raise ConfigError(f"channels={c} must be divisible by groups={self.groups} "
                              f"and branches={self.branches}")
        if self.conv1d_kernel != 3:
            raise ConfigError("the statistics reduction needs a kernel of 3 over the 3 statistics")
        if self.spectral_mode not in SPECTRAL_MODES:
            raise ConfigError(f"spectral_mode must be one of {SPECTRAL_MODES}")


def daca_stats(f: Tensor) -> Tensor:
    """Per-channel (mean |f|, mean f, population std f): NCHW -> N x C x 3."""
    n, c = f.shape[:2]
    parts = [mean(abs_(f), axis=(2, 3)), mean(f, axis=(2, 3)), std(f, axis=(2, 3))]
    return concat([reshape(p, (n, c, 1)) for p in parts], axis=2)


class DistributionChannelAttention(Module):
    """Statistics -> 1-D conv -> sigmoid scale, applied to the input, then 1x1 conv."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.stat_weight = make_param((1, 1, 3), "kaiming_uniform", rng, dtype, fan_in=3)
        self.stat_bias = make_param((1,), "zeros", rng, dtype)
        self.proj = Conv2d(channels, channels, 1, rng, dtype=dtype)
        self.channels = channels

    def scale(self, f: Tensor) -> Tensor:
        n, c = f.shape[:2]
        stats = reshape(daca_stats(f), (n * c, 1, 3))
        s = ops.conv1d(stats, self.stat_weight, self.stat_bias, padding=0)
        return sigmoid(reshape(s, (n, c, 1, 1)))

    def forward(self, f: Tensor) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.channels:
            raise DimensionError(f"expected N x {self.channels} x H x W, got {f.shape}")
        return self.proj(mul(self.scale(f), f))


def spectral_branch(tokens: Tensor, mode: str) -> Tensor | None:
    """Spectral reduction of N x L x C tokens; ``None`` for mode 'off'."""
    if mode == "off":
        return None
    if mode in ("real", "imag"):
        return ops.dft_2axes(tokens, mode)
    if mode == "amplitude":
        re = ops.dft_2axes(tokens, "real")
        im = ops.dft_2axes(tokens, "imag")
        return sqrt(add(mul(re, re), mul(im, im)))
    raise ConfigError(f"unknown spectral mode {mode!r}")


class DafaAdapter(Module):
    def __init__(self, cfg: DafaConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        c = cfg.channels
        self.cfg = cfg
        self.in_proj = Conv2d(c, c, 1, rng, dtype=dtype)
        self.daca = DistributionChannelAttention(c, rng, dtype)
        self.gconv = Conv2d(c, c, 3, rng, padding=1, groups=cfg.groups, dtype=dtype)
        self.branches = [Linear(c, c // cfg.branches, rng, dtype=dtype) for _ in range(cfg.branches)]
        self.gate = Linear(c, c, rng, dtype=dtype)
        self.out_proj = Conv2d(c, c, 1, rng, init="zeros", dtype=dtype)

    def forward(self, tokens: Tensor, hw: tuple, spectral_mode: str | None = None) -> Tensor:
        mode = spectral_mode or self.cfg.spectral_mode
        if tokens.ndim != 3 or tokens.shape[1] != hw[0] * hw[1]:
            raise DimensionError(f"tokens {tokens.shape} do not match a {hw[0]}x{hw[1]} grid")
        n, _, c = tokens.shape
        fa = self.in_proj(ops.tokens_to_map(tokens, hw))
        fd = self.daca(fa)
        spec = spectral_branch(ops.map_to_tokens(fa), mode)
        if spec is not None:
            fd = add(fd, ops.tokens_to_map(spec, hw))
        fd2 = self.gconv(fd)
        fp = add(ops.pool_adaptive(fd2, "avg"), ops.pool_adaptive(fd2, "max"))
        fp = reshape(fp, (n, c))
        fl = concat([lin(fp) for lin in self.branches], axis=1)
        gate = reshape(sigmoid(self.gate(fl)), (n, c, 1, 1))
        ha = self.out_proj(mul(gate, fd2))
        return add(tokens, ops.map_to_tokens(ha))


def daca_forward(f: Tensor, daca: DistributionChannelAttention) -> Tensor:
    return daca(f)


def dafa_forward(tokens: Tensor, adapter: DafaAdapter, hw: tuple) -> Tensor:
    return adapter(tokens, hw)


def dafa_spectral_variant(tokens: Tensor, adapter: DafaAdapter, hw: tuple, mode: str) -> Tensor:
    """Adapter output with the spectral branch swapped for ``mode``."""
    if mode not in SPECTRAL_MODES:
        raise ConfigError(f"unknown spectral mode {mode!r}")
    return adapter(tokens, hw, spectral_mode=mode)
