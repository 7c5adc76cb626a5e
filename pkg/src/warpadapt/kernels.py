"""Differentiable kernel catalog over rank-4 tensors.

Each kernel pairs a forward rule with a matched backward rule; composites
(SSIM, cosine map) are assembled from primitives and differentiate through
the graph. ``apply`` dispatches by catalog name so one harness can sweep the
whole set.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .autograd import Tensor, concat, div, mul, result
from .errors import ShapeError, UsageError


# -- pointwise ----------------------------------------------------------------

def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * np.asarray(slope, x.dtype.type))
    return result(out, (x,), lambda g: (np.where(pos, g, g * np.asarray(slope, x.dtype.type)),))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return result(s, (x,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return result(t, (x,), lambda g: (g * (1.0 - t * t),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(np.asarray(0.0, x.dtype.type), x.data)
    return result(out, (x,), lambda g: (g * _sigmoid(x.data),))


def log(x: Tensor) -> Tensor:
    return result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    return result(r, (x,), lambda g: (g * 0.5 / r,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data > lo) & (x.data < hi)
    out = np.clip(x.data, lo, hi)
    return result(out, (x,), lambda g: (np.where(inside, g, 0.0).astype(x.dtype),))


def absolute(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return result(np.abs(x.data), (x,), lambda g: (g * sgn,))


def square(x: Tensor) -> Tensor:
    return result(x.data * x.data, (x,), lambda g: (g * 2.0 * x.data,))


def smooth_l1(a: Tensor, b: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 map: quadratic below ``beta``, linear above."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if beta <= 0:
        raise UsageError("beta must be positive")
    d = a.data - b.data
    ad = np.abs(d)
    quad = ad < beta
    out = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta).astype(a.dtype)

    def backward(g):
        dd = np.where(quad, d / beta, np.sign(d))
        return g * dd, -g * dd

    return result(out, (a, b), backward)


# -- convolutions -------------------------------------------------------------

def _windows(v: np.ndarray, kh: int, kw: int, stride: int = 1) -> np.ndarray:
    """Sliding (kh, kw) windows over the two spatial axes: (b, c, ho, wo, kh, kw)."""
    win = np.lib.stride_tricks.sliding_window_view(v, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride] if stride > 1 else win


def _dilate(v: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return v
    bs, c, h, w = v.shape
    out = np.zeros((bs, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=v.dtype)
    out[:, :, ::stride, ::stride] = v
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """2-D convolution, zero padding. Weight (cout, cin, kh, kw), bias (1, cout, 1, 1)."""
    if stride not in (1, 2):
        raise UsageError(f"stride must be 1 or 2, got {stride}")
    bs, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"input has {cin} channels, weight expects {cin_w}")
    if b.shape != (1, cout, 1, 1):
        raise ShapeError(f"bias shape {b.shape} != (1, {cout}, 1, 1)")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"kernel {kh}x{kw} too large for input {h}x{wd} with pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.einsum("bchwij,ocij->bohw", _windows(xp, kh, kw, stride), w.data,
                    optimize=True) + b.data

    def backward(g):
        db = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
        dw = np.einsum("bchwij,bohw->ocij", _windows(xp, kh, kw, stride), g,
                       optimize=True)
        # input gradient: full correlation of the (dilated) output gradient with
        # the flipped kernel; asymmetric right padding absorbs positions the
        # strided forward never reached, and the crop is folded into the left pad
        gd = _dilate(g, stride)
        gp = np.pad(gd, ((0, 0), (0, 0),
                         (kh - 1 - pad, h + pad - gd.shape[2]),
                         (kw - 1 - pad, wd + pad - gd.shape[3])))
        wf = w.data[:, :, ::-1, ::-1]
        dx = np.einsum("bohwij,ocij->bchw", _windows(gp, kh, kw, 1), wf, optimize=True)
        return dx, dw, db

    return result(out, (x, w, b), backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """Transposed convolution. Weight (cin, cout, kh, kw); output grows by ``stride``."""
    bs, cin, h, wd = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"input has {cin} channels, weight expects {cin_w}")
    if b.shape != (1, cout, 1, 1):
        raise ShapeError(f"bias shape {b.shape} != (1, {cout}, 1, 1)")
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (wd - 1) * stride - 2 * pad + kw
    if ho <= 0 or wo <= 0:
        raise ShapeError("degenerate transposed-conv output")
    # forward is the adjoint of a stride-s convolution: dilate, pad, correlate
    # with the flipped kernel
    xd = _dilate(x.data, stride)
    xpad = np.pad(xd, ((0, 0), (0, 0), (kh - 1 - pad, kh - 1 - pad),
                       (kw - 1 - pad, kw - 1 - pad)))
    wf = w.data[:, :, ::-1, ::-1]
    out = np.einsum("bchwij,coij->bohw", _windows(xpad, kh, kw, 1), wf,
                    optimize=True) + b.data

    def backward(g):
        db = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        gwin = _windows(gp, kh, kw, stride)
        dw = np.einsum("bchw,bohwij->coij", x.data, gwin, optimize=True)
        dx = np.einsum("bohwij,coij->bchw", gwin, w.data, optimize=True)
        return dx, dw, db

    return result(out, (x, w, b), backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """View of a contiguous channel range as its own tensor."""
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel range [{start}, {stop}) invalid for {x.shape}")
    out = x.data[:, start:stop].copy()

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return result(out, (x,), backward)


# -- fixed-window blur (used by SSIM) -----------------------------------------

def _gaussian_window(size: int, sigma: float, dtype) -> np.ndarray:
    half = (size - 1) / 2.0
    t = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return (g / g.sum()).astype(dtype)


def _blur_axis(v: np.ndarray, win: np.ndarray, axis: int) -> np.ndarray:
    half = (win.size - 1) // 2
    pads = [(0, 0)] * 4
    pads[axis] = (half, half)
    vp = np.pad(v, pads)
    out = np.zeros_like(v)
    sl = [slice(None)] * 4
    n = v.shape[axis]
    for k in range(win.size):
        sl[axis] = slice(k, k + n)
        out += win[k] * vp[tuple(sl)]
    return out


def gaussian_blur(x: Tensor, size: int = 11, sigma: float = 1.5) -> Tensor:
    """Depthwise Gaussian blur, zero padding, unit-sum window."""
    if size % 2 != 1 or size < 3:
        raise UsageError("window size must be odd and >= 3")
    win = _gaussian_window(size, sigma, x.data.dtype)

    def run(v):
        return _blur_axis(_blur_axis(v, win, 2), win, 3)

    # symmetric window + zero padding: the adjoint of the blur is the blur
    return result(run(x.data), (x,), lambda g: (run(g),))


# -- resampling ---------------------------------------------------------------

def downsample2(x: Tensor) -> Tensor:
    """Factor-2 bilinear downsample: the mean of each 2x2 block."""
    bs, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample2 needs even extents, got {h}x{w}")
    v = x.data.reshape(bs, c, h // 2, 2, w // 2, 2)
    out = v.mean(axis=(3, 5))

    def backward(g):
        gx = np.empty((bs, c, h // 2, 2, w // 2, 2), dtype=g.dtype)
        gx[...] = (g * 0.25)[:, :, :, None, :, None]
        return (gx.reshape(bs, c, h, w),)

    return result(out, (x,), backward)


def _up2_axis(v: np.ndarray, axis: int) -> np.ndarray:
    # out[2i] = 0.25 in[i-1] + 0.75 in[i]; out[2i+1] = 0.75 in[i] + 0.25 in[i+1]
    # with edge replication, so constants are preserved exactly.
    lo = np.take(v, [0], axis=axis)
    hi = np.take(v, [v.shape[axis] - 1], axis=axis)
    prev = np.concatenate([lo, np.delete(v, -1, axis=axis)], axis=axis)
    nxt = np.concatenate([np.delete(v, 0, axis=axis), hi], axis=axis)
    even = 0.25 * prev + 0.75 * v
    odd = 0.75 * v + 0.25 * nxt
    out_shape = list(v.shape)
    out_shape[axis] *= 2
    out = np.empty(out_shape, dtype=v.dtype)
    sl_e = [slice(None)] * 4
    sl_o = [slice(None)] * 4
    sl_e[axis] = slice(0, None, 2)
    sl_o[axis] = slice(1, None, 2)
    out[tuple(sl_e)] = even
    out[tuple(sl_o)] = odd
    return out


def _up2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    sl_e = [slice(None)] * 4
    sl_o = [slice(None)] * 4
    sl_e[axis] = slice(0, None, 2)
    sl_o[axis] = slice(1, None, 2)
    ge = g[tuple(sl_e)]
    go = g[tuple(sl_o)]
    dv = 0.75 * ge + 0.75 * go
    # shift contributions: in[i] gets 0.25*ge[i+1] (as prev) and 0.25*go[i-1] (as next)
    first = [slice(None)] * 4
    rest = [slice(None)] * 4
    first[axis] = slice(0, -1)
    rest[axis] = slice(1, None)
    dv[tuple(first)] += 0.25 * ge[tuple(rest)]
    dv[tuple(rest)] += 0.25 * go[tuple(first)]
    # edge replication folds the clamped taps back onto the border samples
    edge0 = [slice(None)] * 4
    edge0[axis] = slice(0, 1)
    edge1 = [slice(None)] * 4
    edge1[axis] = slice(-1, None)
    dv[tuple(edge0)] += 0.25 * ge[tuple(edge0)]
    dv[tuple(edge1)] += 0.25 * go[tuple(edge1)]
    return dv


def upsample2(x: Tensor) -> Tensor:
    """Factor-2 bilinear upsample with edge replication."""
    out = _up2_axis(_up2_axis(x.data, 2), 3)

    def backward(g):
        return (_up2_axis_adjoint(_up2_axis_adjoint(g, 3), 2),)

    return result(out, (x,), backward)


# -- grid sampling ------------------------------------------------------------

def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of ``x`` at absolute pixel coordinates.

    ``grid`` is (b, 2, ho, wo): channel 0 holds source x-coordinates, channel 1
    source y-coordinates. Out-of-bounds taps read as zero and contribute no
    gradient to the input. Differentiable in both the input and the grid.
    """
    bs, c, h, w = x.shape
    if grid.shape[0] != bs or grid.shape[1] != 2:
        raise ShapeError(f"grid shape {grid.shape} incompatible with input {x.shape}")
    ho, wo = grid.shape[2], grid.shape[3]
    gx = grid.data[:, 0]
    gy = grid.data[:, 1]
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = (gx - x0).astype(x.dtype)
    fy = (gy - y0).astype(x.dtype)

    taps = []
    bidx = np.arange(bs).reshape(bs, 1, 1)
    for dy, dx_, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yi = y0 + dy
        xi = x0 + dx_
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        # advanced indexing puts the broadcast dims first: (b, ho, wo, c)
        vals = x.data[bidx, :, yc, xc]
        vals[~ok] = 0
        taps.append((wgt, vals, ok, yc, xc))

    out = np.zeros((bs, ho, wo, c), dtype=x.dtype)
    for wgt, vals, _, _, _ in taps:
        out += wgt[:, :, :, None] * vals
    out = out.transpose(0, 3, 1, 2)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # (b, ho, wo, c)
        dx_total = np.zeros(bs * c * h * w, dtype=np.float64)
        for wgt, _, ok, yc, xc in taps:
            contrib = gt * wgt[:, :, :, None]
            contrib[~ok] = 0
            cidx = np.arange(c).reshape(1, 1, 1, c)
            flat = ((bidx[..., None] * c + cidx) * h + yc[..., None]) * w + xc[..., None]
            dx_total += np.bincount(flat.reshape(-1), weights=contrib.reshape(-1),
                                    minlength=bs * c * h * w)
        dinput = dx_total.reshape(bs, c, h, w).astype(x.dtype)

        v00, v01, v10, v11 = (t[1] for t in taps)
        dgx = (1 - fy)[:, :, :, None] * (v01 - v00) + fy[:, :, :, None] * (v11 - v10)
        dgy = (1 - fx)[:, :, :, None] * (v10 - v00) + fx[:, :, :, None] * (v11 - v01)
        dgrid = np.stack(
            [(gt * dgx).sum(axis=3), (gt * dgy).sum(axis=3)], axis=1
        ).astype(grid.dtype)
        return dinput, dgrid

    return result(out, (x, grid), backward)


# -- correlation --------------------------------------------------------------

def correlation(a: Tensor, b: Tensor, max_disp: int, axis: int = 3,
                signed: bool = False) -> Tensor:
    """Displacement correlation along one spatial axis, channel-mean normalized.

    Channel ``j`` holds mean_c a(p) * b(p shifted by the j-th displacement);
    displacements run 0..D (stereo convention) or -D..D when ``signed``.
    Out-of-range shifts read as zero.
    """
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if axis not in (2, 3):
        raise UsageError("correlation axis must be 2 (vertical) or 3 (horizontal)")
    if max_disp < 1 or max_disp >= a.shape[axis]:
        raise UsageError(f"max_disp {max_disp} out of range for extent {a.shape[axis]}")
    disps = list(range(-max_disp, max_disp + 1)) if signed else list(range(max_disp + 1))
    bs, c, h, w = a.shape
    out_shape = (bs, len(disps), h, w)
    inv_c = 1.0 / c

    def shifted_slices(k):
        # returns (dst, src) slices with dst on a/output, src on b: b indexed at p - k
        sl_dst = [slice(None)] * 4
        sl_src = [slice(None)] * 4
        if k >= 0:
            sl_dst[axis] = slice(k, None)
            sl_src[axis] = slice(0, a.shape[axis] - k)
        else:
            sl_dst[axis] = slice(0, a.shape[axis] + k)
            sl_src[axis] = slice(-k, None)
        return tuple(sl_dst), tuple(sl_src)

    out = np.zeros(out_shape, dtype=a.dtype)
    for j, k in enumerate(disps):
        dst, src = shifted_slices(k)
        prod = (a.data[dst] * b.data[src]).sum(axis=1) * inv_c
        osl = [slice(None), j] + list(dst[2:])
        out[tuple(osl)] = prod

    def backward(g):
        da = np.zeros_like(a.data)
        db = np.zeros_like(b.data)
        for j, k in enumerate(disps):
            dst, src = shifted_slices(k)
            gsl = [slice(None), slice(j, j + 1)] + list(dst[2:])
            gj = g[tuple(gsl)] * inv_c
            da[dst] += gj * b.data[src]
            db[src] += gj * a.data[dst]
        return da, db

    return result(out, (a, b), backward)


# -- composite maps -----------------------------------------------------------

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def ssim_map(a: Tensor, b: Tensor, size: int = 11, sigma: float = 1.5) -> Tensor:
    """Per-pixel structural similarity with an 11x1.5 Gaussian window.

    Constants use dynamic range 1.0 (images live in [0, 1]). Identical inputs
    give a map of exactly 1.
    """
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mu_a = gaussian_blur(a, size, sigma)
    mu_b = gaussian_blur(b, size, sigma)
    var_a = gaussian_blur(mul(a, a), size, sigma) - mul(mu_a, mu_a)
    var_b = gaussian_blur(mul(b, b), size, sigma) - mul(mu_b, mu_b)
    cov = gaussian_blur(mul(a, b), size, sigma) - mul(mu_a, mu_b)
    num = (2.0 * mul(mu_a, mu_b) + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mul(mu_a, mu_a) + mul(mu_b, mu_b) + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return div(num, den)


def cosine_map(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-pixel cosine similarity of the channel vectors, shape (b, 1, h, w)."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    num = mul(a, b).sum(axis=1)
    na = sqrt(mul(a, a).sum(axis=1) + eps)
    nb = sqrt(mul(b, b).sum(axis=1) + eps)
    return div(num, mul(na, nb))


# -- catalog dispatch ----------------------------------------------------------

KERNELS = {
    "add": lambda inputs, **p: inputs[0] + inputs[1],
    "sub": lambda inputs, **p: inputs[0] - inputs[1],
    "mul": lambda inputs, **p: mul(inputs[0], inputs[1]),
    "div": lambda inputs, **p: div(inputs[0], inputs[1]),
    "scalar_mul": lambda inputs, **p: inputs[0] * p["value"],
    "scalar_add": lambda inputs, **p: inputs[0] + p["value"],
    "abs": lambda inputs, **p: absolute(inputs[0]),
    "square": lambda inputs, **p: square(inputs[0]),
    "sqrt": lambda inputs, **p: sqrt(inputs[0]),
    "log": lambda inputs, **p: log(inputs[0]),
    "clamp": lambda inputs, **p: clamp(inputs[0], p["lo"], p["hi"]),
    "leaky_relu": lambda inputs, **p: leaky_relu(inputs[0], p.get("slope", 0.1)),
    "sigmoid": lambda inputs, **p: sigmoid(inputs[0]),
    "tanh": lambda inputs, **p: tanh(inputs[0]),
    "softplus": lambda inputs, **p: softplus(inputs[0]),
    "mean": lambda inputs, **p: inputs[0].mean(p.get("axis")),
    "sum": lambda inputs, **p: inputs[0].sum(p.get("axis")),
    "concat": lambda inputs, **p: concat(inputs, p.get("axis", 1)),
    "conv2d": lambda inputs, **p: conv2d(*inputs, **p),
    "conv_transpose2d": lambda inputs, **p: conv_transpose2d(*inputs, **p),
    "gaussian_blur": lambda inputs, **p: gaussian_blur(inputs[0], **p),
    "upsample2": lambda inputs, **p: upsample2(inputs[0]),
    "downsample2": lambda inputs, **p: downsample2(inputs[0]),
    "grid_sample": lambda inputs, **p: grid_sample(inputs[0], inputs[1]),
    "correlation": lambda inputs, **p: correlation(inputs[0], inputs[1], **p),
    "smooth_l1": lambda inputs, **p: smooth_l1(inputs[0], inputs[1], p.get("beta", 1.0)),
    "ssim_map": lambda inputs, **p: ssim_map(inputs[0], inputs[1]),
    "cosine_map": lambda inputs, **p: cosine_map(inputs[0], inputs[1]),
}


def apply(kernel: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Run a catalog kernel by name."""
    fn = KERNELS.get(kernel)
    if fn is None:
        raise UsageError(f"unknown kernel {kernel!r}")
    return fn(list(inputs), **params)
