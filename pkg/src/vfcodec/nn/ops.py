"""Differentiable operations on (channels, height, width) tensors.

Every op returns a new Tensor and registers a closure computing parent
gradients from the output gradient. Convolutions run via im2col so the
accumulation order inside a build is fixed.
"""

from __future__ import annotations

import numpy as np
from scipy import special as sp_special

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make_result

# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary_shapes(a: Tensor, b: Tensor, op_name: str):
    if a.data.shape == b.data.shape:
        return
    if a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeError(f"{op_name}: shapes {a.data.shape} and {b.data.shape} differ")


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # only 0-d broadcast is supported
    return np.sum(grad, dtype=grad.dtype).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)

    return make_result(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return make_result(x.data * c, (x,), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    inv = 1.0 / b.data

    def backward(g):
        return (_reduce_to(g * inv, a.data.shape),
                _reduce_to(-g * a.data * inv * inv, b.data.shape))

    return make_result(a.data * inv, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return make_result(-x.data, (x,), backward)


def shift(x: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g,)

    return make_result(x.data + float(c), (x,), backward)


def tsum(x: Tensor) -> Tensor:
    def backward(g):
        return (np.full(x.data.shape, g, dtype=x.data.dtype),)

    return make_result(np.sum(x.data), (x,), backward)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        return (np.full(x.data.shape, g / n, dtype=x.data.dtype),)

    return make_result(np.mean(x.data), (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = x.data > 0.0
    out = np.where(mask, x.data, slope * x.data)

    def backward(g):
        return (np.where(mask, g, slope * g),)

    return make_result(out, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x), linear beyond 30 to avoid overflow
    out = np.where(x.data > 30.0, x.data, np.log1p(np.exp(np.minimum(x.data, 30.0))))

    def backward(g):
        return (g * sp_special.expit(x.data),)

    return make_result(out, (x,), backward)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data > lo
    out = np.maximum(x.data, lo)

    def backward(g):
        return (np.where(mask, g, 0.0),)

    return make_result(out, (x,), backward)


def tlog(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return make_result(np.log(x.data), (x,), backward)


def texp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return make_result(out, (x,), backward)


def normal_cdf(x: Tensor) -> Tensor:
    """Standard normal CDF; derivative is the normal PDF."""
    out = sp_special.ndtr(x.data)
    inv_sqrt_2pi = 0.3989422804014327

    def backward(g):
        return (g * inv_sqrt_2pi * np.exp(-0.5 * x.data * x.data),)

    return make_result(out, (x,), backward)


def stop_gradient(x: Tensor) -> Tensor:
    return x.detach()


# ---------------------------------------------------------------------------
# structure: concatenation, grouped channel reshapes


def concat(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    trailing = parts[0].data.shape[1:]
    for p in parts:
        if p.data.ndim != 3 or p.data.shape[1:] != trailing:
            raise ShapeError("concat: all inputs must be (C, H, W) with equal H, W")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return make_result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 3 or not (0 <= start < stop <= x.data.shape[0]):
        raise ShapeError(f"slice_channels[{start}:{stop}] invalid for {x.data.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return make_result(x.data[start:stop].copy(), (x,), backward)


def expand_channel(x: Tensor, h: int, w: int) -> Tensor:
    """(C,) -> (C, h, w) by broadcast; gradient sums over the spatial plane."""
    if x.data.ndim != 1:
        raise ShapeError("expand_channel expects a 1-D tensor")

    def backward(g):
        return (g.sum(axis=(1, 2)),)

    return make_result(np.broadcast_to(x.data[:, None, None], (x.data.shape[0], h, w)).copy(),
                       (x,), backward)


def group_sum(x: Tensor, group_size: int) -> Tensor:
    """(C*S, H, W) -> (C, H, W), summing each group of S consecutive channels."""
    cs, h, w = x.data.shape
    if cs % group_size:
        raise ShapeError(f"group_sum: {cs} channels not divisible by {group_size}")
    c = cs // group_size
    out = x.data.reshape(c, group_size, h, w).sum(axis=1)

    def backward(g):
        return (np.repeat(g[:, None], group_size, axis=1).reshape(cs, h, w),)

    return make_result(out, (x,), backward)


def softmax_groups(x: Tensor, group_size: int) -> Tensor:
    """Per-pixel softmax over each group of S consecutive channels."""
    cs, h, w = x.data.shape
    if cs % group_size:
        raise ShapeError(f"softmax_groups: {cs} channels not divisible by {group_size}")
    c = cs // group_size
    xg = x.data.reshape(c, group_size, h, w)
    m = xg.max(axis=1, keepdims=True)
    e = np.exp(xg - m)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        gg = g.reshape(c, group_size, h, w)
        dot = np.sum(gg * y, axis=1, keepdims=True)
        return ((y * (gg - dot)).reshape(cs, h, w),)

    return make_result(y.reshape(cs, h, w), (x,), backward)


# ---------------------------------------------------------------------------
# resampling


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    if x.data.ndim != 3:
        raise ShapeError("upsample2 expects (C, H, W)")
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        c, h2, w2 = g.shape
        return (g.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4)),)

    return make_result(out, (x,), backward)


def downsample2(x: Tensor) -> Tensor:
    """2x2 average pooling; spatial dims must be even."""
    if x.data.ndim != 3:
        raise ShapeError("downsample2 expects (C, H, W)")
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample2: odd spatial dims ({h}, {w})")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return make_result(out, (x,), backward)


def resample(x: Tensor, mode: str) -> Tensor:
    if mode == "up2":
        return upsample2(x)
    if mode == "down2":
        return downsample2(x)
    raise ShapeError(f"resample: unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# convolutions


def _pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, pad:pad + h, pad:pad + w] = x
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    if pad:
        x = _pad_spatial(x, pad)
    c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"kernel ({kh}, {kw}) larger than padded input ({h}, {w})")
    s0, s1, s2 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (c, kh, kw, ho, wo), (s0, s1, s2, s1 * stride, s2 * stride)
    )
    return np.ascontiguousarray(view), ho, wo


def _col2im(dcols: np.ndarray, in_shape, kh, kw, stride, pad):
    c, h, w = in_shape
    dx = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    _, _, _, ho, wo = dcols.shape
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    if pad:
        dx = dx[:, pad:-pad, pad:-pad]
    return dx


def conv2d(x: Tensor, weight: Tensor, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) on a (C_in, H, W) tensor.

    weight: (C_out, C_in, kh, kw) with odd kh, kw; bias: (C_out,) or None.
    Output spatial dims: floor((in + 2*pad - k) / stride) + 1.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects x (C,H,W) and weight (Co,Ci,kh,kw)")
    co, ci, kh, kw = weight.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got ({kh}, {kw})")
    if x.data.shape[0] != ci:
        raise ShapeError(f"conv2d: input has {x.data.shape[0]} channels, kernel expects {ci}")
    if bias is not None and bias.data.shape != (co,):
        raise ShapeError("conv2d: bias shape must be (C_out,)")

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    flat = cols.reshape(ci * kh * kw, ho * wo)
    out = weight.data.reshape(co, -1) @ flat
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(co, ho, wo)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(co, -1)
        dw = (g2 @ flat.T).reshape(weight.data.shape)
        dcols = (weight.data.reshape(co, -1).T @ g2).reshape(ci, kh, kw, ho, wo)
        dx = _col2im(dcols, x.data.shape, kh, kw, stride, padding)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(1, 2))

    return make_result(out, parents, backward)


def depthwise_conv(x: Tensor, weight: Tensor, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Channel-wise convolution with multiplier.

    x: (C, H, W); weight: (C, M, kh, kw); bias: (C*M,) or None.
    Output: (C*M, Ho, Wo); channel c*M+m only sees input channel c.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError("depthwise_conv expects x (C,H,W) and weight (C,M,kh,kw)")
    c, m, kh, kw = weight.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"depthwise_conv: kernel dims must be odd, got ({kh}, {kw})")
    if x.data.shape[0] != c:
        raise ShapeError(f"depthwise_conv: input has {x.data.shape[0]} channels, kernel expects {c}")
    if bias is not None and bias.data.shape != (c * m,):
        raise ShapeError("depthwise_conv: bias shape must be (C*M,)")

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    flat = cols.reshape(c, kh * kw, ho * wo)
    out = weight.data.reshape(c, m, kh * kw) @ flat
    if bias is not None:
        out = out + bias.data.reshape(c, m, 1)
    out = out.reshape(c * m, ho, wo)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g3 = g.reshape(c, m, ho * wo)
        dw = (g3 @ flat.transpose(0, 2, 1)).reshape(weight.data.shape)
        dcols = (weight.data.reshape(c, m, kh * kw).transpose(0, 2, 1) @ g3)
        dx = _col2im(dcols.reshape(c, kh, kw, ho, wo), x.data.shape, kh, kw, stride, padding)
        if bias is None:
            return dx, dw
        return dx, dw, g3.sum(axis=2).reshape(c * m)

    return make_result(out, parents, backward)


def grouped_pointwise(x: Tensor, weight: Tensor, bias=None) -> Tensor:
    """Per-group 1x1 mixing: x (C*M, H, W), weight (C, Mo, M) -> (C*Mo, H, W)."""
    if weight.data.ndim != 3:
        raise ShapeError("grouped_pointwise expects weight (C, Mo, M)")
    c, mo, m = weight.data.shape
    cm, h, w = x.data.shape
    if cm != c * m:
        raise ShapeError(f"grouped_pointwise: input channels {cm} != C*M = {c * m}")
    if bias is not None and bias.data.shape != (c * mo,):
        raise ShapeError("grouped_pointwise: bias shape must be (C*Mo,)")

    xr = x.data.reshape(c, m, h * w)
    out = weight.data @ xr
    if bias is not None:
        out = out + bias.data.reshape(c, mo, 1)
    out = out.reshape(c * mo, h, w)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g3 = g.reshape(c, mo, h * w)
        dw = g3 @ xr.transpose(0, 2, 1)
        dx = (weight.data.transpose(0, 2, 1) @ g3).reshape(cm, h, w)
        if bias is None:
            return dx, dw
        return dx, dw, g3.sum(axis=2).reshape(c * mo)

    return make_result(out, parents, backward)


# ---------------------------------------------------------------------------
# warping (deformable-style ablation fallback)


def bilinear_warp(f: Tensor, flow: Tensor) -> Tensor:
    """Sample f at (y + flow[1], x + flow[0]) with border clamping.

    f: (C, H, W); flow: (2, H, W) in cells (flow[0] horizontal, flow[1] vertical).
    """
    if flow.data.shape != (2,) + f.data.shape[1:]:
        raise ShapeError(f"bilinear_warp: flow {flow.data.shape} does not match feature {f.data.shape}")
    c, h, w = f.data.shape
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sy = gy + flow.data[1]
    sx = gx + flow.data[0]
    iny = (sy > 0.0) & (sy < h - 1.0)
    inx = (sx > 0.0) & (sx < w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0).astype(f.data.dtype)
    wx = (sx - x0).astype(f.data.dtype)

    f00 = f.data[:, y0, x0]
    f01 = f.data[:, y0, x1]
    f10 = f.data[:, y1, x0]
    f11 = f.data[:, y1, x1]
    top = f00 + wx * (f01 - f00)
    bot = f10 + wx * (f11 - f10)
    out = top + wy * (bot - top)

    def backward(g):
        w00 = (1 - wy) * (1 - wx)
        w01 = (1 - wy) * wx
        w10 = wy * (1 - wx)
        w11 = wy * wx
        df = np.zeros_like(f.data)
        np.add.at(df, (slice(None), y0, x0), w00 * g)
        np.add.at(df, (slice(None), y0, x1), w01 * g)
        np.add.at(df, (slice(None), y1, x0), w10 * g)
        np.add.at(df, (slice(None), y1, x1), w11 * g)
        d_dx = (1 - wy) * (f01 - f00) + wy * (f11 - f10)
        d_dy = (bot - top)
        dflow = np.stack([
            np.sum(g * d_dx, axis=0) * inx,
            np.sum(g * d_dy, axis=0) * iny,
        ])
        return df, dflow.astype(flow.data.dtype)

    return make_result(out, (f, flow), backward)


# ---------------------------------------------------------------------------
# losses


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference; gradient w.r.t. a is 2(a-b)/N."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse: shapes {a.data.shape} and {b.data.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        d = (2.0 * g / n) * diff
        return d, -d

    return make_result(np.mean(diff * diff), (a, b), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-pixel cross entropy averaged over pixels.

    logits: (K, H, W); labels: (H, W) integer array with values < K.
    """
    k = logits.data.shape[0]
    labels = np.asarray(labels)
    if labels.shape != logits.data.shape[1:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.data.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"label ids must lie in [0, {k})")
    m = logits.data.max(axis=0, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=0, keepdims=True)
    p = e / z
    h, w = labels.shape
    picked = np.take_along_axis(logits.data, labels[None], axis=0)[0]
    loss = np.mean((m[0] + np.log(z[0])) - picked)

    def backward(g):
        d = p.copy()
        at_label = np.take_along_axis(d, labels[None], axis=0) - 1.0
        np.put_along_axis(d, labels[None], at_label, axis=0)
        return ((g / (h * w)) * d,)

    return make_result(loss, (logits,), backward)
