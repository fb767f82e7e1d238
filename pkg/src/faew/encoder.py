"""
Shared-weight Siamese transformer encoder.

A small ViT: patch embedding, a stack of windowed ("L") and global ("G")
attention blocks, a cross-temporal gate after every local block, and the
adapter after one global block. Both temporal branches run through the same
modules one after the other, so identical inputs give bit-identical outputs.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .dafa import DafaAdapter, DafaConfig
from .errors import ConfigError, DimensionError
from .nn import Conv2d, LayerNorm, Linear, LowRankLinear, Module, make_param
from .tensor import (Tensor, add, concat, gelu, matmul, mul, permute, reshape, scalar_mul,
                     sigmoid, softmax)


@dataclass
class EncoderConfig:
    in_channels: int = 3
    image_size: int = 64
    patch: int = 8
    dim: int = 64
    blocks: str = "LLLG"
    window: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    lora_rank: int = 4
    lora_alpha: float = 1.0
    lora_targets: tuple = ("q", "v")
    use_lora: bool = True
    pos_embed: bool = True
    ttag: bool = True
    dafa: bool = True
    dafa_position: int | None = None
    dafa_branches: int = 4
    dafa_groups: int = 4
    spectral_mode: str = "real"

    def resolved_dafa_position(self) -> int:
        if self.dafa_position is None:
            return self.blocks.rindex("G")
        return self.dafa_position

    def validate(self) -> None:
        if self.image_size % self.patch:
            raise ConfigError(f"image_size={self.image_size} not divisible by patch={self.patch}")
        if self.dim % self.heads:
            raise ConfigError(f"dim={self.dim} not divisible by heads={self.heads}")
        if set(self.blocks) - {"L", "G"} or not self.blocks:
            raise ConfigError(f"blocks must be a string over 'L'/'G', got {self.blocks!r}")
        if self.dafa:
            if "G" not in self.blocks:
                raise ConfigError("the adapter needs at least one global block")
            pos = self.resolved_dafa_position()
            if not 0 <= pos < len(self.blocks) or self.blocks[pos] != "G":
                raise ConfigError(f"dafa_position={pos} does not address a global block in {self.blocks!r}")

    def fingerprint(self) -> str:
        return hashlib.sha1(repr(sorted(asdict(self).items())).encode()).hexdigest()[:12]


@dataclass
class BitemporalFeatures:
    f0: Tensor
    f1: Tensor
    config_hash: str = ""

    def __post_init__(self):
        if self.f0.shape != self.f1.shape:
            raise DimensionError(f"temporal features differ: {self.f0.shape} vs {self.f1.shape}")

    def __iter__(self):
        return iter((self.f0, self.f1))


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, lora_rank: int = 4,
                 lora_alpha: float = 1.0, lora_targets=("q", "v"), use_lora: bool = True,
                 dtype=np.float32):
        self.heads = heads
        self.dim = dim
        for name in ("q", "k", "v"):
            if use_lora and name in lora_targets:
                layer = LowRankLinear(dim, dim, rng, rank=lora_rank, alpha=lora_alpha, dtype=dtype)
            else:
                layer = Linear(dim, dim, rng, dtype=dtype)
            setattr(self, name, layer)
        self.proj = Linear(dim, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        b, length, c = x.shape
        h = self.heads
        d = c // h

        def heads(t):
            return permute(reshape(t, (b, length, h, d)), (0, 2, 1, 3))

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = scalar_mul(matmul(q, permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
        y = matmul(softmax(scores, axis=-1), v)
        y = reshape(permute(y, (0, 2, 1, 3)), (b, length, c))
        return self.proj(y)


def window_partition(tokens: Tensor, hw: tuple, ws: int) -> Tensor:
    n, _, c = tokens.shape
    h, w = hw
    t = reshape(tokens, (n, h // ws, ws, w // ws, ws, c))
    t = permute(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (n * (h // ws) * (w // ws), ws * ws, c))


def window_merge(windows: Tensor, hw: tuple, ws: int, n: int) -> Tensor:
    h, w = hw
    c = windows.shape[-1]
    t = reshape(windows, (n, h // ws, w // ws, ws, ws, c))
    t = permute(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (n, h * w, c))


class AttentionBlock(Module):
    """Pre-norm attention + MLP, both residual."""

    def __init__(self, cfg: EncoderConfig, mode: str, rng: np.random.Generator, dtype=np.float32):
        if mode not in ("local_window", "global"):
            raise ConfigError(f"unknown attention mode {mode!r}")
        self.mode = mode
        self.window = cfg.window
        dim = cfg.dim
        self.norm1 = LayerNorm(dim, rng, dtype)
        self.attn = Attention(dim, cfg.heads, rng, cfg.lora_rank, cfg.lora_alpha, cfg.lora_targets,
                              cfg.use_lora, dtype)
        self.norm2 = LayerNorm(dim, rng, dtype)
        self.fc1 = Linear(dim, dim * cfg.mlp_ratio, rng, dtype=dtype)
        self.fc2 = Linear(dim * cfg.mlp_ratio, dim, rng, dtype=dtype)

    def forward(self, tokens: Tensor, hw: tuple) -> Tensor:
        n = tokens.shape[0]
        x = self.norm1(tokens)
        if self.mode == "local_window":
            ws = self.window
            if hw[0] % ws or hw[1] % ws:
                raise ConfigError(f"token grid {hw} not divisible by window {ws}")
            x = window_merge(self.attn(window_partition(x, hw, ws)), hw, ws, n)
        else:
            x = self.attn(x)
        tokens = add(tokens, x)
        return add(tokens, self.fc2(gelu(self.fc1(self.norm2(tokens)))))


def attention_block(tokens: Tensor, block: AttentionBlock, hw: tuple) -> Tensor:
    return block(tokens, hw)


class TemporalGate(Module):
    """Cross-temporal gate: out_j = f_j + sigmoid(Conv1x1([f_j, f_other])) * f_other.

    The gate sees its own branch first, so swapping the inputs swaps the outputs.
    """

    def __init__(self, dim: int, rng: np.random.Generator, bias: float = -4.0, dtype=np.float32):
        self.conv = Conv2d(2 * dim, dim, 1, rng, init="zeros", bias_value=bias, dtype=dtype)

    def gate(self, f_self: Tensor, f_other: Tensor) -> Tensor:
        return sigmoid(self.conv(concat([f_self, f_other], axis=1)))

    def forward(self, f0: Tensor, f1: Tensor) -> tuple:
        if f0.shape != f1.shape:
            raise DimensionError(f"gate inputs differ in shape: {f0.shape} vs {f1.shape}")
        out0 = add(f0, mul(self.gate(f0, f1), f1))
        out1 = add(f1, mul(self.gate(f1, f0), f0))
        return out0, out1


def ttag_gate(f0: Tensor, f1: Tensor, gate: TemporalGate) -> tuple:
    return gate(f0, f1)


class SiameseEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        c = cfg.dim
        self.patch_embed = Conv2d(cfg.in_channels, c, cfg.patch, rng, stride=cfg.patch, dtype=dtype)
        grid = cfg.image_size // cfg.patch
        self.pos_embed = (make_param((1, grid * grid, c), "normal", rng, dtype, std=0.02)
                          if cfg.pos_embed else None)
        self.blocks = [AttentionBlock(cfg, "local_window" if t == "L" else "global", rng, dtype)
                       for t in cfg.blocks]
        self.gates = [TemporalGate(c, rng, dtype=dtype) for t in cfg.blocks if t == "L" and cfg.ttag]
        self.dafa = None
        if cfg.dafa:
            self.dafa = DafaAdapter(DafaConfig(c, cfg.dafa_branches, cfg.dafa_groups,
                                               spectral_mode=cfg.spectral_mode), rng, dtype)

    def embed(self, img: Tensor) -> tuple:
        n, _, h, w = img.shape
        p = self.cfg.patch
        if h % p or w % p:
            raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
        hw = (h // p, w // p)
        tokens = ops.map_to_tokens(self.patch_embed(img))
        if self.pos_embed is not None:
            if self.pos_embed.shape[1] != hw[0] * hw[1]:
                raise DimensionError(f"position embedding covers {self.pos_embed.shape[1]} tokens, "
                                     f"image gives {hw[0] * hw[1]}")
            tokens = add(tokens, self.pos_embed)
        return tokens, hw

    def forward(self, img0: Tensor, img1: Tensor) -> BitemporalFeatures:
        if img0.shape != img1.shape:
            raise DimensionError(f"image pair differs in shape: {img0.shape} vs {img1.shape}")
        t0, hw = self.embed(img0)
        t1, _ = self.embed(img1)
        dafa_at = self.cfg.resolved_dafa_position() if self.dafa is not None else -1
        gate_iter = iter(self.gates)
        for i, block in enumerate(self.blocks):
            t0, t1 = block(t0, hw), block(t1, hw)
            if block.mode == "local_window" and self.cfg.ttag:
                gate = next(gate_iter)
                m0, m1 = gate(ops.tokens_to_map(t0, hw), ops.tokens_to_map(t1, hw))
                t0, t1 = ops.map_to_tokens(m0), ops.map_to_tokens(m1)
            if i == dafa_at:
                t0, t1 = self.dafa(t0, hw), self.dafa(t1, hw)
        return BitemporalFeatures(ops.tokens_to_map(t0, hw), ops.tokens_to_map(t1, hw),
                                  self.cfg.fingerprint())


def encode_pair(img0: Tensor, img1: Tensor, encoder: SiameseEncoder) -> BitemporalFeatures:
    return encoder(img0, img1)
