"""
Gradient-check registry and oracle self-test suites.

Every registry entry builds a float64 case for a given shape index; the
suites compare fast kernels against slow, obviously-correct references.
Kernels are looked up on the ``ops`` module at call time, so a patched
kernel is what gets tested.
"""
from __future__ import annotations

import re
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .data import GenSpec, generate, translate
from .dafa import DafaAdapter, DafaConfig, DistributionChannelAttention
from .encoder import AttentionBlock, EncoderConfig, TemporalGate
from .errors import ConfigError
from .gradcheck import GradCheckReport, grad_check
from .head import PyramidDecoder
from .metrics import confusion_counts, derive_metrics
from .msafa import FlowFusion, MultiscaleIntegration
from .nn import LowRankLinear, Module
from .tensor import (Tensor, abs_, concat, div, exp, gelu, log, log_softmax, matmul, mean, mul,
                     permute, relu, reshape, sigmoid, softmax, split, sqrt, std, sub, sum_)

F64 = np.float64


# -- reference implementations -------------------------------------------------

def naive_conv2d(x, w, b=None, stride=1, padding=0, dilation=1, groups=1) -> np.ndarray:
    """Direct sliding-window convolution, one output element at a time."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (w[oc, ci, ki, kj]
                                        * xp[ni, g * cg + ci, i * stride + ki * dilation, j * stride + kj * dilation])
                    out[ni, oc, i, j] = acc + (0.0 if b is None else b[oc])
    return out


def complex_dft_part(x: np.ndarray, part: str = "real") -> np.ndarray:
    """Complex 2-D DFT over the last two axes, then the requested part."""
    spec = np.fft.fft(np.fft.fft(x.astype(np.complex128), axis=-1), axis=-2)
    return spec.real if part == "real" else spec.imag


def naive_unfold3x3(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, c * 9, h * w))
    for ci in range(c):
        for ky in range(3):
            for kx in range(3):
                for i in range(h):
                    for j in range(w):
                        yy, xx = i + ky - 1, j + kx - 1
                        if 0 <= yy < h and 0 <= xx < w:
                            out[:, ci * 9 + ky * 3 + kx, i * w + j] = x[:, ci, yy, xx]
    return out


def shift_oracle(x: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """out[..., i, j] = x[..., i + dy, j + dx] with border clamp."""
    h, w = x.shape[-2:]
    ys = np.clip(np.arange(h) + dy, 0, h - 1)
    xs = np.clip(np.arange(w) + dx, 0, w - 1)
    return x[..., ys, :][..., xs]


WARP_SPEC = GenSpec(p_add=0.0, p_remove=0.0, p_none=1.0, shift_range=0, jitter=0.0)


def warp_energies(seed: int, shift: int = 2, channels: int = 4) -> tuple:
    """(warped, unwarped) difference energy for a pair shifted by ``shift`` px along x.

    T2 is T1 translated right, so sampling the T1 branch at ``x - shift``
    (flow dx = -shift) realigns it with the T2 branch.
    """
    rng = np.random.default_rng(seed)
    fusion = FlowFusion(channels, rng, out_channels=channels, groups=2, dtype=np.float64)
    img = generate(WARP_SPEC, seed).t1.astype(np.float64) / 255.0
    img = img - img.mean(axis=(0, 1))
    feats = np.concatenate([img, img.mean(axis=2, keepdims=True)], axis=2)[..., :channels]
    f0 = feats.transpose(2, 0, 1)[None]
    f1 = translate(feats, shift, 0).transpose(2, 0, 1)[None]
    flow = np.zeros((1, 2) + f0.shape[2:])
    flow[:, 0] = -shift
    parts = fusion.parts(Tensor(f0), Tensor(f1), (Tensor(flow), Tensor(np.zeros_like(flow))))
    unwarped = parts["fb"].data - parts["fb_prime"].data
    return float(np.sum(parts["out_prime"].data ** 2)), float(np.sum(unwarped ** 2))


# -- gradient registry -----------------------------------------------------------

@dataclass
class GradCase:
    fn: Callable[[], Tensor]
    inputs: list
    names: list
    max_elements: int | None = None


def _t(rng, *shape, scale=1.0, offset=0.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale + offset, requires_grad=True)


def _randomize(module: Module, rng, scale=0.3) -> list:
    """Give every parameter random values (zero-initialised ones included) and return them."""
    named = list(module.named_parameters())
    for _, p in named:
        p.data = rng.standard_normal(p.shape) * scale
        p.requires_grad = True
    return named


# Parameters whose exact gradient is identically zero, so finite differences
# only see rounding noise: a key bias shifts every score of a query equally
# (softmax is shift-invariant), and an ensemble bias reaches both temporal
# branches and cancels in the warped difference.
ZERO_GRAD_PARAMS = re.compile(r"(^|\.)attn\.k\.bias$|^msai\.ensemble\.\d+\.bias$")


def _checkable(named) -> list:
    return [(n, p) for n, p in named if not ZERO_GRAD_PARAMS.search(n)]


def _module_case(module, rng, make_inputs, call, max_elements=6) -> GradCase:
    named = _checkable(_randomize(module, rng))
    xs = make_inputs()
    inputs = xs + [p for _, p in named]
    names = [f"x{i}" for i in range(len(xs))] + [n for n, _ in named]
    return GradCase(lambda: call(*xs), inputs, names, max_elements)


SHAPES = ((1, 4, 5), (2, 3, 4), (1, 8, 6))  # (n, c, spatial)


def _elementwise(op, positive=False):
    def build(rng, k):
        n, c, s = SHAPES[k]
        a = _t(rng, n, c, s)
        if positive:
            a.data = np.abs(a.data) + 0.5
        return GradCase(lambda: op(a), [a], ["a"])
    return build


def _binary(op, positive_b=False):
    def build(rng, k):
        n, c, s = SHAPES[k]
        a = _t(rng, n, c, s)
        b = _t(rng, 1, c, s)  # broadcast over the batch axis
        if positive_b:
            b.data = np.abs(b.data) + 0.5
        return GradCase(lambda: op(a, b), [a, b], ["a", "b"])
    return build


def _case_conv2d(rng, k):
    cfgs = [(1, 2, 2, 5, 3, 1, 1, 1, 1), (2, 4, 4, 6, 3, 2, 1, 2, 2), (1, 4, 6, 7, 3, 1, 3, 3, 2)]
    n, cin, cout, s, ks, stride, pad, dil, groups = cfgs[k]
    x = _t(rng, n, cin, s, s)
    w = _t(rng, cout, cin // groups, ks, ks)
    b = _t(rng, cout)
    return GradCase(lambda: ops.conv2d(x, w, b, stride=stride, padding=pad, dilation=dil, groups=groups),
                    [x, w, b], ["x", "w", "b"])


def _case_conv1d(rng, k):
    n, c, length = SHAPES[k]
    x = _t(rng, n, c, length + 2)
    w = _t(rng, 2, c, 3)
    return GradCase(lambda: ops.conv1d(x, w, padding=1), [x, w], ["x", "w"])


def _case_linear(rng, k):
    n, c, s = SHAPES[k]
    x = _t(rng, n, s, c)
    w = _t(rng, 3, c)
    b = _t(rng, 3)
    return GradCase(lambda: ops.linear(x, w, b), [x, w, b], ["x", "w", "b"])


def _case_matmul(rng, k):
    n, c, s = SHAPES[k]
    a = _t(rng, n, s, c)
    b = _t(rng, n, c, 3)
    return GradCase(lambda: matmul(a, b), [a, b], ["a", "b"])


def _case_pool(mode):
    def build(rng, k):
        n, c, s = SHAPES[k]
        x = _t(rng, n, c, s, s)
        return GradCase(lambda: ops.pool_adaptive(x, mode), [x], ["x"])
    return build


def _case_dft(part):
    def build(rng, k):
        n, c, s = SHAPES[k]
        x = _t(rng, n, s * 2, c)
        return GradCase(lambda: ops.dft_2axes(x, part), [x], ["x"])
    return build


def _case_unfold(rng, k):
    n, c, s = SHAPES[k]
    x = _t(rng, n, c, s, s + 1)
    return GradCase(lambda: ops.unfold3x3(x), [x], ["x"])


def _case_resize(rng, k):
    n, c, s = SHAPES[k]
    x = _t(rng, n, c, s, s)
    size = [(2 * s, 2 * s), (s - 1, s + 3), (3, 2)][k]
    return GradCase(lambda: ops.resize_bilinear(x, size), [x], ["x"])


def _case_grid_sample(rng, k):
    n, c, s = SHAPES[k]
    x = _t(rng, n, c, s, s)
    # fractional flows kept away from integer kinks and the border clamp
    flow = Tensor(np.round(rng.uniform(-1, 1, (n, 2, s, s))) + rng.uniform(0.2, 0.8, (n, 2, s, s)),
                  requires_grad=True)
    flow.data[:, :, [0, -1], :] = 0.5
    flow.data[:, :, :, [0, -1]] = 0.5
    return GradCase(lambda: ops.grid_sample_bilinear(x, flow), [x, flow], ["x", "flow"])


def _case_layer_norm(rng, k):
    n, c, s = SHAPES[k]
    x = _t(rng, n, s, c)
    w = _t(rng, c)
    b = _t(rng, c)
    return GradCase(lambda: ops.layer_norm(x, w, b), [x, w, b], ["x", "w", "b"])


def _case_conv_transpose(rng, k):
    n, c, s = SHAPES[k]
    x = _t(rng, n, c, s, s)
    w = _t(rng, c, 3, 2, 2)
    b = _t(rng, 3)
    return GradCase(lambda: ops.conv_transpose_stride(x, w, b), [x, w, b], ["x", "w", "b"])


def _case_reductions(rng, k):
    n, c, s = SHAPES[k]
    a = _t(rng, n, c, s)
    return GradCase(lambda: concat([reshape(sum_(a, axis=1), (n, 1, s)), mean(a, axis=1, keepdims=True),
                                    std(a, axis=1, keepdims=True)], axis=1), [a], ["a"])


def _case_shape_ops(rng, k):
    n, c, s = SHAPES[k]
    a = _t(rng, n, 2 * c, s)
    def fn():
        p, q = split(permute(a, (0, 2, 1)), 2, axis=2)
        return concat([reshape(p, (n, -1)), reshape(mul(q, q), (n, -1))], axis=1)
    return GradCase(fn, [a], ["a"])


def _case_softmax(log_space):
    def build(rng, k):
        n, c, s = SHAPES[k]
        a = _t(rng, n, c, s)
        op = log_softmax if log_space else softmax
        return GradCase(lambda: op(a, axis=1), [a], ["a"])
    return build


def _case_lowrank(rng, k):
    n, c, s = SHAPES[k]
    layer = LowRankLinear(c, c + 1, rng, rank=2, alpha=2.0, dtype=F64)
    named = [(nm, p) for nm, p in layer.named_parameters() if p.requires_grad]
    for _, p in named:
        p.data = rng.standard_normal(p.shape) * 0.3
    x = _t(rng, n, s, c)
    return GradCase(lambda: layer(x), [x] + [p for _, p in named], ["x"] + [nm for nm, _ in named])


def _case_daca(rng, k):
    n, c, s = SHAPES[k]
    m = DistributionChannelAttention(c, rng, F64)
    return _module_case(m, rng, lambda: [_t(rng, n, c, s, s)], m)


def _case_dafa(mode):
    def build(rng, k):
        n, c, s = SHAPES[k]
        c = 8 if c < 8 else c
        m = DafaAdapter(DafaConfig(c, branches=4, groups=4, spectral_mode=mode), rng, F64)
        hw = (s, s - 1)
        return _module_case(m, rng, lambda: [_t(rng, n, hw[0] * hw[1], c)], lambda x: m(x, hw))
    return build


def _case_msai(rng, k):
    n, c, s = SHAPES[k]
    c = 4 if c < 8 else 8
    m = MultiscaleIntegration(c, rng, groups=4, dtype=F64)
    return _module_case(m, rng, lambda: [_t(rng, n, c, s, s + 1)], m)


def _case_msafa(rng, k):
    n, c, s = SHAPES[k]
    c = 4
    m = FlowFusion(c, rng, out_channels=6, groups=4, dtype=F64)
    named = _checkable(_randomize(m, rng))
    # small flow weights keep sampled positions inside the grid and off integer kinks
    m.flow_proj.weight.data *= 0.05
    m.flow_proj.bias.data[:] = 0.37
    xs = [_t(rng, n, c, s, s), _t(rng, n, c, s, s)]
    return GradCase(lambda: m(*xs), xs + [p for _, p in named], ["f0", "f1"] + [nm for nm, _ in named], 6)


def _block_cfg(k) -> EncoderConfig:
    return EncoderConfig(dim=8, heads=2, window=2, mlp_ratio=2, lora_rank=2, image_size=8, patch=2)


def _case_block(mode):
    def build(rng, k):
        n = (1, 2, 1)[k]
        hw = [(2, 2), (4, 2), (4, 4)][k]
        m = AttentionBlock(_block_cfg(k), mode, rng, F64)
        return _module_case(m, rng, lambda: [_t(rng, n, hw[0] * hw[1], 8)], lambda x: m(x, hw))
    return build


def _case_ttag(rng, k):
    n, c, s = SHAPES[k]
    m = TemporalGate(c, rng, dtype=F64)
    return _module_case(m, rng, lambda: [_t(rng, n, c, s, s), _t(rng, n, c, s, s)],
                        lambda a, b: concat(list(m(a, b)), axis=1))


def _case_decoder(rng, k):
    n, c, s = SHAPES[k]
    s = max(s, 2)
    m = PyramidDecoder(c, rng, width=4, hidden=6, dtype=F64)
    out_hw = [(16, 16), (12, 20), (7, 9)][k]
    return _module_case(m, rng, lambda: [_t(rng, n, c, s, s)], lambda x: m(x, out_hw).logits)


GRAD_REGISTRY: dict = {
    "add": _binary(lambda a, b: a + b),
    "sub": _binary(sub),
    "mul": _binary(mul),
    "div": _binary(div, positive_b=True),
    "abs": _elementwise(abs_),
    "sigmoid": _elementwise(sigmoid),
    "exp": _elementwise(exp),
    "log": _elementwise(log, positive=True),
    "sqrt": _elementwise(sqrt, positive=True),
    "relu": _elementwise(relu),
    "gelu": _elementwise(gelu),
    "softmax": _case_softmax(False),
    "log_softmax": _case_softmax(True),
    "reductions": _case_reductions,
    "shape_ops": _case_shape_ops,
    "matmul": _case_matmul,
    "linear": _case_linear,
    "conv2d": _case_conv2d,
    "conv1d": _case_conv1d,
    "avg_pool": _case_pool("avg"),
    "max_pool": _case_pool("max"),
    "dft_real": _case_dft("real"),
    "dft_imag": _case_dft("imag"),
    "unfold3x3": _case_unfold,
    "resize_bilinear": _case_resize,
    "grid_sample": _case_grid_sample,
    "layer_norm": _case_layer_norm,
    "conv_transpose": _case_conv_transpose,
    "lowrank_linear": _case_lowrank,
    "daca": _case_daca,
    "dafa_real": _case_dafa("real"),
    "dafa_imag": _case_dafa("imag"),
    "dafa_amplitude": _case_dafa("amplitude"),
    "dafa_off": _case_dafa("off"),
    "msai": _case_msai,
    "msafa": _case_msafa,
    "block_local": _case_block("local_window"),
    "block_global": _case_block("global"),
    "ttag": _case_ttag,
    "decoder": _case_decoder,
}


@dataclass
class GradEntryResult:
    name: str
    shape_index: int
    report: GradCheckReport

    @property
    def ok(self) -> bool:
        return self.report.ok


def run_gradcheck(registry=None, tol: float = 1e-4, seed: int = 0, shapes=(0, 1, 2),
                  step: float = 1e-5) -> list:
    registry = GRAD_REGISTRY if registry is None else registry
    if not registry:
        raise ConfigError("gradient registry is empty")
    results = []
    for i, (name, build) in enumerate(registry.items()):
        for k in shapes:
            rng = np.random.default_rng([seed, i, k])
            case = build(rng, k)
            rep = grad_check(case.fn, case.inputs, step=step, tol=tol, names=case.names,
                             max_elements=case.max_elements, seed=seed)
            results.append(GradEntryResult(name, k, rep))
    return results


# -- oracle suites -------------------------------------------------------------------

def suite_dft(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    failures = []
    for trial in range(10):
        length, c = rng.integers(1, 17, size=2)
        x = rng.standard_normal((2, length, c))
        for part in ("real", "imag"):
            err = np.max(np.abs(ops.dft_2axes(Tensor(x), part).data - complex_dft_part(x, part)))
            if err > 1e-10:
                failures.append(f"dft {part} {x.shape}: error {err:.2e}")
    return failures


def suite_conv(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    failures = []
    for stride, pad, dil, groups in [(1, 0, 1, 1), (2, 1, 1, 2), (1, 2, 2, 1), (1, 3, 3, 4)]:
        x = rng.standard_normal((1, 4, 7, 6))
        w = rng.standard_normal((4, 4 // groups, 3, 3))
        b = rng.standard_normal(4)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, dil, groups).data
        want = naive_conv2d(x, w, b, stride, pad, dil, groups)
        if got.shape != want.shape or np.max(np.abs(got - want)) > 1e-10:
            failures.append(f"conv stride={stride} pad={pad} dil={dil} groups={groups}")
    return failures


def suite_unfold(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 5, 4))
    got = ops.unfold3x3(Tensor(x)).data
    want = naive_unfold3x3(x)
    if got.shape != want.shape or not np.array_equal(got, want):
        return ["unfold3x3 disagrees with the gather oracle"]
    return []


def suite_warp(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    failures = []
    x = rng.standard_normal((2, 3, 9, 8))
    if not np.array_equal(ops.grid_sample_bilinear(Tensor(x), Tensor(np.zeros((2, 2, 9, 8)))).data, x):
        failures.append("zero flow is not an exact identity")
    const = np.full((1, 2, 6, 6), 3.25)
    for _ in range(20):
        flow = Tensor(rng.uniform(-4, 4, (1, 2, 6, 6)))
        if not np.array_equal(ops.grid_sample_bilinear(Tensor(const), flow).data, const):
            failures.append("constant image not invariant")
            break
    for dx, dy in [(1, 0), (0, -2), (2, 1)]:
        flow = np.zeros((2, 2, 9, 8))
        flow[:, 0], flow[:, 1] = dx, dy
        got = ops.grid_sample_bilinear(Tensor(x), Tensor(flow)).data
        if not np.array_equal(got, shift_oracle(x, dx, dy)):
            failures.append(f"integer shift ({dx}, {dy}) differs from the shift oracle")
    return failures


def suite_metrics(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    failures = []
    for _ in range(50):
        p = rng.integers(0, 2, (6, 7))
        t = rng.integers(0, 2, (6, 7))
        c = confusion_counts(p, t)
        if c.total != p.size:
            failures.append("counts do not cover every pixel")
        r = derive_metrics(c)
        if not r.degenerate and abs(r.f1 / 100 - 2 * (r.iou / 100) / (1 + r.iou / 100)) > 1e-12:
            failures.append("F1/IoU identity violated")
    rep = derive_metrics(confusion_counts(np.ones((3, 3)), np.ones((3, 3))))
    if (rep.pr, rep.rc, rep.f1, rep.iou) != (100.0, 100.0, 100.0, 100.0):
        failures.append("perfect prediction is not 100")
    return failures


SUITES: dict = {
    "dft": suite_dft,
    "conv": suite_conv,
    "unfold": suite_unfold,
    "warp": suite_warp,
    "metrics": suite_metrics,
}


def run_selftest(suites=None, seed: int = 0, out=print) -> int:
    """Run every suite, print one pass/fail line each; exit code 0, 1 or 2."""
    suites = SUITES if suites is None else suites
    if not suites:
        out("selftest: no suites registered")
        return 2
    failed = 0
    for name, suite in suites.items():
        t0 = time.perf_counter()
        try:
            problems = suite(seed)
        except Exception as exc:  # a crashing suite is a failing suite
            problems = [f"{type(exc).__name__}: {exc}"]
        status = "PASS" if not problems else "FAIL"
        out(f"{status}\t{name}\t{time.perf_counter() - t0:.2f}s" + ("" if not problems else "\t" + problems[0]))
        failed += bool(problems)
    return 1 if failed else 0
