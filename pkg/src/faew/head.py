"""Feature-pyramid decoder, change-map loss and the assembled detector."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .encoder import EncoderConfig, SiameseEncoder
from .errors import DataError
from .msafa import ConcatFusion, FlowFusion
from .nn import Conv2d, ConvTranspose, Module
from .tensor import Tensor, concat, gelu, log_softmax, mul, scalar_mul, sum_


@dataclass
class ChangeMap:
    """Logits N x 2 x H x W; channel 0 = unchanged, 1 = changed."""

    logits: Tensor

    def probabilities(self) -> np.ndarray:
        x = self.logits.data
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def prediction(self) -> np.ndarray:
        """Binary N x H x W map (ties go to 'unchanged')."""
        x = self.logits.data
        return (x[:, 1] > x[:, 0]).astype(np.uint8)


class PyramidDecoder(Module):
    """Simple feature pyramid from one map, then a two-layer 1x1 projection.

    Scales x4, x2, x1, x1/2 are each projected to ``width`` channels,
    resized to the x4 grid, concatenated and projected to 2 logits.
    """

    def __init__(self, cin: int, rng: np.random.Generator, width: int = 32, hidden: int = 64,
                 dtype=np.float32):
        self.up4a = ConvTranspose(cin, width, 2, rng, dtype)
        self.up4b = ConvTranspose(width, width, 2, rng, dtype)
        self.up2 = ConvTranspose(cin, width, 2, rng, dtype)
        self.down2 = Conv2d(cin, width, 2, rng, stride=2, dtype=dtype)
        self.lateral = [Conv2d(width, width, 1, rng, dtype=dtype), Conv2d(width, width, 1, rng, dtype=dtype),
                        Conv2d(cin, width, 1, rng, dtype=dtype), Conv2d(width, width, 1, rng, dtype=dtype)]
        self.proj1 = Conv2d(4 * width, hidden, 1, rng, dtype=dtype)
        self.proj2 = Conv2d(hidden, 2, 1, rng, dtype=dtype)

    def forward(self, fused: Tensor, out_hw: tuple) -> ChangeMap:
        scales = [self.up4b(gelu(self.up4a(fused))), self.up2(fused), fused, self.down2(fused)]
        top = scales[0].shape[2:]
        maps = [ops.resize_bilinear(lat(s), top) for lat, s in zip(self.lateral, scales)]
        x = self.proj2(gelu(self.proj1(concat(maps, axis=1))))
        return ChangeMap(ops.resize_bilinear(x, tuple(out_hw)))


def decode(fused: Tensor, decoder: PyramidDecoder, out_hw: tuple) -> ChangeMap:
    return decoder(fused, out_hw)


def loss_ce(cmap: ChangeMap, mask) -> Tensor:
    """Mean pixel cross-entropy of the 2-class map against a binary N x 1 x H x W mask."""
    logits = cmap.logits
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.ndim == 3:
        m = m[:, None]
    if not np.all((m == 0) | (m == 1)):
        raise DataError("mask values must be 0 or 1")
    if m.shape[0] != logits.shape[0] or m.shape[2:] != logits.shape[2:]:
        raise DataError(f"mask shape {m.shape} does not match logits {logits.shape}")
    onehot = np.concatenate([1 - m, m], axis=1).astype(logits.dtype)
    n, _, h, w = logits.shape
    picked = sum_(mul(log_softmax(logits, axis=1), Tensor(onehot)))
    return scalar_mul(picked, -1.0 / (n * h * w))


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    msafa: bool = True
    fuse_channels: int = 64
    fuse_groups: int = 4
    decoder_width: int = 32
    decoder_hidden: int = 64

    @property
    def dafa(self) -> bool:
        return self.encoder.dafa


class ChangeDetector(Module):
    """encoder -> fusion -> decoder."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.encoder = SiameseEncoder(cfg.encoder, rng, dtype)
        c = cfg.encoder.dim
        if cfg.msafa:
            self.fuse = FlowFusion(c, rng, cfg.fuse_channels, cfg.fuse_groups, dtype)
        else:
            self.fuse = ConcatFusion(c, rng, cfg.fuse_channels, dtype)
        self.decoder = PyramidDecoder(cfg.fuse_channels, rng, cfg.decoder_width, cfg.decoder_hidden, dtype)

    def forward(self, img0: Tensor, img1: Tensor) -> ChangeMap:
        f0, f1 = self.encoder(img0, img1)
        return self.decoder(self.fuse(f0, f1), img0.shape[2:])

