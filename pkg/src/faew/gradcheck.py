"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    """Max relative error per checked input, in input order."""

    names: list
    errors: list
    tol: float
    checked: list = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def ok(self) -> bool:
        return all(e <= self.tol for e in self.errors)

    def __str__(self) -> str:
        rows = [f"{n:<24s} {e:.3e} ({k} elems)" for n, e, k in zip(self.names, self.errors, self.checked)]
        return "\n".join(rows)


SCALE_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|, SCALE_FLOOR)."""
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), SCALE_FLOOR)
    return float(diff / scale)


def _scalarize(fn: Callable[[], Tensor], seed: int) -> Callable[[], Tensor]:
    """Contract a non-scalar output with a fixed random cotangent."""
    cache = {}

    def wrapped():
        out = fn()
        if out.size == 1:
            return out.sum()
        if "w" not in cache:
            rng = np.random.default_rng(seed)
            cache["w"] = Tensor(rng.standard_normal(out.shape).astype(out.dtype))
        return (out * cache["w"]).sum()

    return wrapped


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               tol: float = 1e-4, names: Optional[Sequence[str]] = None,
               max_elements: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Compare backward() against (f(x+h) - f(x-h)) / 2h for every input.

    ``fn`` must rebuild the graph from the current ``inputs`` data on every
    call. With ``max_elements`` only a seeded random subset of coordinates of
    each input is perturbed. Failures are reported, never raised.
    """
    f = _scalarize(fn, seed)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    rng = np.random.default_rng(seed)
    errors, counts = [], []
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            coords = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        num = np.empty(len(coords))
        for k, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            num[k] = (fp - fm) / (2 * step)
        errors.append(relative_error(ga.reshape(-1)[coords], num))
        counts.append(len(coords))
    labels = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    for t in inputs:
        t.grad = None
    return GradCheckReport(labels, errors, tol, counts)
