"""
Differentiable array operations used by the network modules.

All spatial tensors are row-major NCHW; token tensors are N x L x C with
L = h * w scanned row-major.
"""
from __future__ import annotations

import functools
from typing import Optional

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, make_result, matmul, permute, reshape


def _as2(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _gather_taps(xp: np.ndarray, kh, kw, sh, sw, dh, dw, ho, wo) -> np.ndarray:
    """(N, C, Hp, Wp) padded input -> (N, C, kh, kw, ho, wo) sliding windows."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        y0 = i * dh
        for j in range(kw):
            x0 = j * dw
            cols[:, :, i, j] = xp[:, :, y0:y0 + sh * (ho - 1) + 1:sh, x0:x0 + sw * (wo - 1) + 1:sw]
    return cols


def _scatter_taps(dcols: np.ndarray, padded_shape, kh, kw, sh, sw, dh, dw, ho, wo) -> np.ndarray:
    """Adjoint of :func:`_gather_taps`: overlap-sum windows back onto the padded grid."""
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kh):
        y0 = i * dh
        for j in range(kw):
            x0 = j * dw
            dxp[:, :, y0:y0 + sh * (ho - 1) + 1:sh, x0:x0 + sw * (wo - 1) + 1:sw] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0,
           dilation=1, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding, dilation and channel groups.

    ``padding``, ``stride`` and ``dilation`` accept an int or an (h, w) pair.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and OIHW weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups or cg != c // groups:
        raise DimensionError(
            f"conv2d: input {x.shape} and weight {weight.shape} incompatible with groups={groups}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    ph, pw = _as2(padding)
    sh, sw = _as2(stride)
    dh, dw = _as2(dilation)
    if ph < 0 or pw < 0:
        raise DimensionError(f"conv2d: negative padding {padding}")
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")

    g = groups
    og = o // g
    k = cg * kh * kw
    wm = weight.data.reshape(g, og, k)
    pointwise = kh == kw == 1 and ph == pw == 0 and sh == sw == 1
    if pointwise:
        xp = x.data
        cols = xp.reshape(n, g, k, h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
        cols = _gather_taps(xp, kh, kw, sh, sw, dh, dw, ho, wo).reshape(n, g, k, ho * wo)
    out = np.matmul(wm, cols).reshape(n, o, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None]

    def vjp(gout):
        gr = gout.reshape(n, g, og, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(wm.transpose(0, 2, 1), gr)
            if pointwise:
                gx = dcols.reshape(x.shape)
            else:
                dcols = dcols.reshape(n, c, kh, kw, ho, wo)
                dxp = _scatter_taps(dcols, xp.shape, kh, kw, sh, sw, dh, dw, ho, wo)
                gx = dxp[:, :, ph:ph + h, pw:pw + w]
        if weight.requires_grad:
            gw = np.matmul(gr, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, lambda gout: vjp(gout)[:len(parents)], "conv2d")


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 0,
           stride: int = 1, dilation: int = 1, groups: int = 1) -> Tensor:
    """1-D convolution over N x C x L, expressed through :func:`conv2d`."""
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError(f"conv1d expects NCL input and OIk weight, got {x.shape} and {weight.shape}")
    n, c, length = x.shape
    o, i, k = weight.shape
    out = conv2d(reshape(x, (n, c, 1, length)), reshape(weight, (o, i, 1, k)), bias,
                 stride=(1, stride), padding=(0, padding), dilation=(1, dilation), groups=groups)
    return reshape(out, (n, o, out.shape[-1]))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x @ weight.T + bias."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, lambda g: vjp(g)[:len(parents)], "linear")


def pool_adaptive(x: Tensor, mode: str = "avg") -> Tensor:
    """Global average or max pooling NCHW -> NC11.

    Max ties resolve to the first element in row-major order, which is also
    where the gradient goes.
    """
    if x.ndim != 4:
        raise DimensionError(f"pool_adaptive expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    if mode == "avg":
        out = flat.mean(axis=2).reshape(n, c, 1, 1)
        scale = x.dtype.type(1.0 / (h * w))
        return make_result(out, (x,),
                           lambda g: (np.broadcast_to(g * scale, x.shape).copy(),), "avg_pool")
    if mode == "max":
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)

        def vjp(g):
            gx = np.zeros((n, c, h * w), dtype=g.dtype)
            np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=2)
            return (gx.reshape(x.shape),)

        return make_result(out, (x,), vjp, "max_pool")
    raise ValueError(f"unknown pooling mode {mode!r}")


@functools.lru_cache(maxsize=32)
def dft_matrices(n: int, dtype_name: str = "float64") -> tuple:
    """Real and (negated) imaginary parts of the n-point DFT matrix.

    F[k, m] = exp(-2 pi i k m / n) = cos - i sin, returned as (cos, sin).
    """
    km = np.outer(np.arange(n), np.arange(n)) % n
    ang = 2.0 * np.pi * km / n
    cos, sin = np.cos(ang), np.sin(ang)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos.astype(dtype_name), sin.astype(dtype_name)


def _dft_part(x: np.ndarray, part: str) -> np.ndarray:
    _, length, c = x.shape
    cl, sl = dft_matrices(length, x.dtype.name)
    cc, sc = dft_matrices(c, x.dtype.name)
    # F_L X F_C with F = cos - i sin
    if part == "real":
        return cl @ x @ cc - sl @ x @ sc
    if part == "imag":
        return -(sl @ x @ cc + cl @ x @ sc)
    raise ValueError(f"unknown DFT part {part!r}")


def dft_2axes(x: Tensor, part: str = "real") -> Tensor:
    """Real or imaginary part of the DFT over the hidden axis then the sequence axis.

    Input is N x L x C. Both part maps are self-adjoint because the DFT
    matrices are symmetric, so the backward pass reuses the forward map.
    """
    if x.ndim != 3:
        raise DimensionError(f"dft expects N x L x C, got {x.shape}")
    out = _dft_part(x.data, part)
    return make_result(out, (x,), lambda g: (_dft_part(g, part),), f"dft_{part}")


def dft_real_2axes(x: Tensor) -> Tensor:
    return dft_2axes(x, "real")


def unfold3x3(x: Tensor) -> Tensor:
    """3x3 neighbourhoods (zero padding 1): NCHW -> N x (C*9) x (H*W).

    Row index is c * 9 + (ky * 3 + kx).
    """
    if x.ndim != 4:
        raise DimensionError(f"unfold3x3 expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _gather_taps(xp, 3, 3, 1, 1, 1, 1, h, w)

    def vjp(g):
        dxp = _scatter_taps(g.reshape(n, c, 3, 3, h, w), xp.shape, 3, 3, 1, 1, 1, 1, h, w)
        return (dxp[:, :, 1:1 + h, 1:1 + w],)

    return make_result(cols.reshape(n, c * 9, h * w), (x,), vjp, "unfold3x3")


@functools.lru_cache(maxsize=64)
def _resize_matrix(n_out: int, n_in: int, dtype_name: str) -> np.ndarray:
    """Linear-interpolation matrix, half-pixel centres, edge clamped."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m = m.astype(dtype_name)
    m.setflags(write=False)
    return m


def resize_bilinear(x: Tensor, size: tuple) -> Tensor:
    """Bilinear resampling of an NCHW tensor to ``size`` = (H, W)."""
    if x.ndim != 4:
        raise DimensionError(f"resize_bilinear expects NCHW, got {x.shape}")
    ho, wo = size
    _, _, h, w = x.shape
    if (ho, wo) == (h, w):
        return x
    rh = _resize_matrix(ho, h, x.dtype.name)
    rw = _resize_matrix(wo, w, x.dtype.name)
    out = rh @ x.data @ rw.T
    return make_result(out, (x,), lambda g: (rh.T @ g @ rw,), "resize_bilinear")


def grid_sample_bilinear(x: Tensor, flow: Tensor) -> Tensor:
    """Sample ``x`` at (col + dx, row + dy) with bilinear weights and border clamp.

    ``flow`` is N x 2 x H x W in pixels: channel 0 is dx, channel 1 is dy.
    Interpolation is written as nested lerps, so integer positions and
    constant images are reproduced exactly.
    """
    if x.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2 \
            or flow.shape[0] != x.shape[0] or flow.shape[2:] != x.shape[2:]:
        raise DimensionError(f"grid_sample: input {x.shape} and flow {flow.shape} are incompatible")
    n, c, h, w = x.shape
    dt = x.dtype
    fd = flow.data.astype(dt, copy=False)
    ys, xs = np.meshgrid(np.arange(h, dtype=dt), np.arange(w, dtype=dt), indexing="ij")
    gx = xs + fd[:, 0]
    gy = ys + fd[:, 1]
    cx = np.clip(gx, 0, w - 1)
    cy = np.clip(gy, 0, h - 1)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (cx - x0).astype(dt)[:, None]
    wy = (cy - y0).astype(dt)[:, None]

    flat = x.data.reshape(n, c, h * w)
    idx = [(yy * w + xx).reshape(n, 1, h * w) for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))]
    v00, v01, v10, v11 = (np.take_along_axis(flat, np.broadcast_to(i, (n, c, h * w)), axis=2)
                          .reshape(n, c, h, w) for i in idx)
    top = v00 + wx * (v01 - v00)
    bot = v10 + wx * (v11 - v10)
    out = top + wy * (bot - top)

    def vjp(g):
        gin = gflow = None
        if x.requires_grad:
            weights = ((1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy)
            base = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
            flat_idx = np.concatenate([(base + i).reshape(-1) for i in idx])
            vals = np.concatenate([(g * wt).reshape(-1) for wt in weights])
            gin = np.bincount(flat_idx, weights=vals, minlength=n * c * h * w)
            gin = gin.astype(dt).reshape(x.shape)
        if flow.requires_grad:
            dwx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
            dwy = bot - top
            inside_x = ((gx >= 0) & (gx <= w - 1))[:, None]
            inside_y = ((gy >= 0) & (gy <= h - 1))[:, None]
            gfx = (g * dwx * inside_x).sum(axis=1)
            gfy = (g * dwy * inside_y).sum(axis=1)
            gflow = np.stack([gfx, gfy], axis=1).astype(flow.dtype)
        return gin, gflow

    return make_result(out, (x, flow), vjp, "grid_sample")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data

    def vjp(g):
        gh = g * weight.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, g.shape[-1])
        gw = (lead * xhat.reshape(lead.shape)).sum(axis=0)
        gb = lead.sum(axis=0)
        return gx.astype(xd.dtype), gw, gb

    return make_result(out.astype(xd.dtype, copy=False), (x, weight, bias), vjp, "layer_norm")


def conv_transpose_stride(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Transposed convolution whose kernel equals its stride (non-overlapping taps).

    ``weight`` is C_in x C_out x s x s; the output is s times larger per axis.
    """
    n, c, h, w = x.shape
    ci, o, s, s2 = weight.shape
    if ci != c or s != s2:
        raise DimensionError(f"conv_transpose: input {x.shape} incompatible with weight {weight.shape}")
    t = matmul(permute(x, (0, 2, 3, 1)), reshape(weight, (c, o * s * s)))
    t = permute(reshape(t, (n, h, w, o, s, s)), (0, 3, 1, 4, 2, 5))
    out = reshape(t, (n, o, h * s, w * s))
    if bias is not None:
        out = out + reshape(bias, (1, o, 1, 1))
    return out


def tokens_to_map(tokens: Tensor, hw: tuple) -> Tensor:
    """N x L x C -> N x C x h x w (row-major token scan)."""
    n, length, c = tokens.shape
    h, w = hw
    if h * w != length:
        raise DimensionError(f"token count {length} does not match grid {h}x{w}")
    return reshape(permute(tokens, (0, 2, 1)), (n, c, h, w))


def map_to_tokens(fmap: Tensor) -> Tensor:
    n, c, h, w = fmap.shape
    return permute(reshape(fmap, (n, c, h * w)), (0, 2, 1))
