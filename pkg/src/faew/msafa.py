"""
Flow-aligned bi-temporal fusion head and its multiscale integration block.

Fusion::

    F_mid            = GConv5x5(concat(f0, f1))
    (flow, flow')    = split(Conv1x1(F_mid), 2)          # two 2-channel fields
    F_b, F'_b        = MSAI(Conv1x1(f0)), MSAI(Conv1x1(f1))   # shared weights
    F'_out           = warp(F_b, flow) - F'_b
    F_out            = warp(F'_b, flow') - F_b
    out              = Conv1x1(concat(F_out, F'_out))
"""
from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Module
from .tensor import Tensor, add, concat, mul, reshape, softmax, split, stack_mean, sub, sum_

DILATION_RATES = (5, 7, 9, 11)


class MultiscaleIntegration(Module):
    """Dilated pyramid, softmax-weighted 3x3 neighbourhood pooling, conv ensemble."""

    def __init__(self, channels: int, rng: np.random.Generator, groups: int = 4,
                 rates=DILATION_RATES, ensemble: int = 3, dtype=np.float32):
        if channels % groups:
            raise ConfigError(f"channels={channels} not divisible by groups={groups}")
        c = channels
        self.channels = c
        self.rates = tuple(rates)
        self.dilated = [Conv2d(c, c, 3, rng, padding=r, dilation=r, dtype=dtype) for r in self.rates]
        self.refine = [Conv2d(c, c, 3, rng, padding=1, groups=groups, dtype=dtype) for _ in self.rates]
        self.point = [Conv2d(c, c, 1, rng, dtype=dtype) for _ in self.rates]
        self.get_weight = Conv2d(c, 9, 1, rng, dtype=dtype)
        self.conv_uw = Conv2d(c, c, 3, rng, padding=1, dtype=dtype)
        self.residual = Conv2d(c, c, 1, rng, dtype=dtype)
        self.ensemble = [Conv2d(c, c, 3, rng, padding=1, dtype=dtype) for _ in range(ensemble)]

    def dilation_features(self, f: Tensor) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.channels:
            raise DimensionError(f"expected N x {self.channels} x H x W, got {f.shape}")
        out = None
        for d, g, p in zip(self.dilated, self.refine, self.point):
            y = p(g(d(f)))
            out = y if out is None else add(out, y)
        return out

    def position_weights(self, f_dil: Tensor) -> Tensor:
        """Softmax over the 9 kernel positions per pixel: N x 9 x H x W."""
        return softmax(self.get_weight(f_dil), axis=1)

    def neighbourhood_pool(self, f_dil: Tensor) -> Tensor:
        n, c, h, w = f_dil.shape
        fu = reshape(ops.unfold3x3(f_dil), (n, c, 9, h * w))
        fw = reshape(self.position_weights(f_dil), (n, 1, 9, h * w))
        return reshape(sum_(mul(fu, fw), axis=2), (n, c, h, w))

    def forward(self, f: Tensor) -> Tensor:
        f_uw = self.conv_uw(self.neighbourhood_pool(self.dilation_features(f)))
        f_r = add(self.residual(f_uw), f_uw)
        return stack_mean([conv(f_r) for conv in self.ensemble])


def msai_forward(f: Tensor, block: MultiscaleIntegration) -> Tensor:
    return block(f)


def grid_sample_bilinear(x: Tensor, flow: Tensor) -> Tensor:
    return ops.grid_sample_bilinear(x, flow)


class FlowFusion(Module):
    def __init__(self, channels: int, rng: np.random.Generator, out_channels: int = 64,
                 groups: int = 4, dtype=np.float32):
        c = channels
        if (2 * c) % groups:
            raise ConfigError(f"2*channels={2 * c} not divisible by groups={groups}")
        self.channels = c
        self.gconv5 = Conv2d(2 * c, 2 * c, 5, rng, padding=2, groups=groups, dtype=dtype)
        self.flow_proj = Conv2d(2 * c, 4, 1, rng, init="zeros", dtype=dtype)
        self.branch_proj = Conv2d(c, c, 1, rng, dtype=dtype)
        self.msai = MultiscaleIntegration(c, rng, groups=groups, dtype=dtype)
        self.fuse_proj = Conv2d(2 * c, out_channels, 1, rng, dtype=dtype)

    def _check(self, f0: Tensor, f1: Tensor) -> None:
        if f0.shape != f1.shape:
            raise DimensionError(f"temporal features differ in shape: {f0.shape} vs {f1.shape}")
        if f0.ndim != 4 or f0.shape[1] != self.channels:
            raise DimensionError(f"expected N x {self.channels} x H x W, got {f0.shape}")

    def compute_flows(self, f0: Tensor, f1: Tensor) -> tuple:
        self._check(f0, f1)
        mid = self.gconv5(concat([f0, f1], axis=1))
        flow, flow_prime = split(self.flow_proj(mid), 2, axis=1)
        return flow, flow_prime

    def parts(self, f0: Tensor, f1: Tensor, flows: tuple | None = None) -> dict:
        """All named intermediates; ``flows`` overrides the predicted fields."""
        self._check(f0, f1)
        fb = self.msai(self.branch_proj(f0))
        fb_prime = self.msai(self.branch_proj(f1))
        flow, flow_prime = flows if flows is not None else self.compute_flows(f0, f1)
        out_prime = sub(ops.grid_sample_bilinear(fb, flow), fb_prime)
        out = sub(ops.grid_sample_bilinear(fb_prime, flow_prime), fb)
        fused = self.fuse_proj(concat([out, out_prime], axis=1))
        return {"fb": fb, "fb_prime": fb_prime, "flow": flow, "flow_prime": flow_prime,
                "out": out, "out_prime": out_prime, "fused": fused}

    def forward(self, f0: Tensor, f1: Tensor, flows: tuple | None = None) -> Tensor:
        return self.parts(f0, f1, flows)["fused"]


def msafa_fuse(f0: Tensor, f1: Tensor, head: FlowFusion) -> Tensor:
    return head(f0, f1)


class ConcatFusion(Module):
    """Plain fusion for ablations: concat + 1x1 conv."""

    def __init__(self, channels: int, rng: np.random.Generator, out_channels: int = 64, dtype=np.float32):
        self.channels = channels
        self.proj = Conv2d(2 * channels, out_channels, 1, rng, dtype=dtype)

    def forward(self, f0: Tensor, f1: Tensor) -> Tensor:
        if f0.shape != f1.shape:
            raise DimensionError(f"temporal features differ in shape: {f0.shape} vs {f1.shape}")
        return self.proj(concat([f0, f1], axis=1))
