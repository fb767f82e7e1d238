"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import UsageError
from .tensor import Tensor

DEFAULT_LR = 2e-4


@dataclass
class OptimState:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: Mapping[str, Tensor], state: OptimState) -> None:
    """One in-place AdamW update of every trainable tensor in ``params``.

    Gradients are read, not cleared.
    """
    trainable = [(k, p) for k, p in params.items() if p.requires_grad]
    for name, p in trainable:
        if p.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in trainable:
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= p.dtype.type(1.0 - state.lr * state.weight_decay)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= (state.lr * update).astype(p.dtype)


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params.values() if p.requires_grad and p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= g.dtype.type(scale)
    return total


def lr_at(step: int, base_lr: float, total_steps: int, warmup: int = 0, schedule: str = "constant") -> float:
    """Learning rate for 1-based ``step``: linear warmup, then constant or cosine decay to 0."""
    if warmup > 0 and step <= warmup:
        return base_lr * step / warmup
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        span = max(total_steps - warmup, 1)
        frac = min(max(step - warmup, 0) / span, 1.0)
        return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))
    raise ValueError(f"unknown schedule {schedule!r}")


class AdamW:
    """Thin stateful wrapper: ``opt.step()`` then ``opt.zero_grad()``."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = DEFAULT_LR, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = dict(params)
        self.state = OptimState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def step(self) -> None:
        adamw_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
