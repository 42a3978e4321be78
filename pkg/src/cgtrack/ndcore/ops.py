"""Differentiable operations over NDArray.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient back to its inputs. Shapes must match exactly;
the only broadcast is the explicit per-channel form of ``hadamard``.
"""
from __future__ import annotations

from numbers import Number

import numpy as np

from . import _kernels
from .array import DimensionError, NDArray, as_array, make_output, note_pieces

# ---------------------------------------------------------------------------
# helpers


def _same_shape(a: NDArray, b: NDArray, op: str) -> None:
    if a.shape != b.shape:
        axes = [i for i, (p, q) in enumerate(zip(a.shape, b.shape)) if p != q]
        if a.ndim != b.ndim:
            raise DimensionError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape} on axes {axes}")


def _scalar(x) -> bool:
    return isinstance(x, Number) and not isinstance(x, bool)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> NDArray:
    a = as_array(a)
    if _scalar(b):
        return make_output(a.data + a.dtype.type(b), (a,), lambda g: (g,), "add_scalar")
    b = as_array(b)
    _same_shape(a, b, "add")
    return make_output(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> NDArray:
    a = as_array(a)
    if _scalar(b):
        return make_output(a.data - a.dtype.type(b), (a,), lambda g: (g,), "sub_scalar")
    b = as_array(b)
    _same_shape(a, b, "sub")
    return make_output(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a) -> NDArray:
    a = as_array(a)
    return make_output(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> NDArray:
    a = as_array(a)
    if _scalar(b):
        s = a.dtype.type(b)
        return make_output(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    b = as_array(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_output(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> NDArray:
    a = as_array(a)
    if _scalar(b):
        return mul(a, 1.0 / b)
    b = as_array(b)
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return ga, -ga * out

    return make_output(out, (a, b), backward, "div")


def reciprocal(a) -> NDArray:
    a = as_array(a)
    out = 1.0 / a.data
    return make_output(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def power(a, exponent: float) -> NDArray:
    a = as_array(a)
    e = float(exponent)
    ad = a.data
    out = ad ** a.dtype.type(e)
    return make_output(out, (a,), lambda g: (g * e * ad ** a.dtype.type(e - 1.0),), "power")


def exp(a) -> NDArray:
    a = as_array(a)
    out = np.exp(a.data)
    return make_output(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> NDArray:
    a = as_array(a)
    ad = a.data
    return make_output(np.log(ad), (a,), lambda g: (g / ad,), "log")


def abs(a) -> NDArray:
    a = as_array(a)
    ad = a.data
    note_pieces(ad > 0)
    return make_output(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def maximum(a, b) -> NDArray:
    a, b = as_array(a), as_array(b)
    _same_shape(a, b, "maximum")
    pick_a = a.data >= b.data
    note_pieces(pick_a)
    return make_output(np.where(pick_a, a.data, b.data), (a, b),
                       lambda g: (g * pick_a, g * ~pick_a), "maximum")


def minimum(a, b) -> NDArray:
    a, b = as_array(a), as_array(b)
    _same_shape(a, b, "minimum")
    pick_a = a.data <= b.data
    note_pieces(pick_a)
    return make_output(np.where(pick_a, a.data, b.data), (a, b),
                       lambda g: (g * pick_a, g * ~pick_a), "minimum")


def clip(a, lo=None, hi=None) -> NDArray:
    a = as_array(a)
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    note_pieces((ad > (-np.inf if lo is None else lo)).astype(np.int8) + (ad > (np.inf if hi is None else hi)))
    return make_output(out, (a,), lambda g: (g * inside,), "clip")


def hadamard(a, b) -> NDArray:
    """Elementwise product. ``b`` may also be an [N, C] per-channel factor
    broadcast over the spatial axes of an [N, C, H, W] ``a``."""
    a, b = as_array(a), as_array(b)
    if a.shape == b.shape:
        return mul(a, b)
    if a.ndim == 4 and b.shape == a.shape[:2]:
        ad, bd = a.data, b.data
        b4 = bd[:, :, None, None]

        def backward(g):
            return g * b4, (g * ad).sum(axis=(2, 3))

        return make_output(ad * b4, (a, b), backward, "hadamard_channel")
    raise DimensionError(f"hadamard: cannot combine {a.shape} with {b.shape}")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(a, axis=None, keepdims: bool = False) -> NDArray:
    a = as_array(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_output(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> NDArray:
    a = as_array(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> NDArray:
    a = as_array(a)
    src = a.shape
    return make_output(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes) -> NDArray:
    a = as_array(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_output(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in parts)


def getitem(a, key) -> NDArray:
    a = as_array(a)
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(key)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return make_output(np.array(a.data[key]), (a,), backward, "getitem")


def repeat_batch(a, n: int) -> NDArray:
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    a = as_array(a)
    out = np.broadcast_to(a.data[None], (n, *a.shape)).copy()
    return make_output(out, (a,), lambda g: (g.sum(axis=0),), "repeat_batch")


def concat(arrays, axis: int = 0) -> NDArray:
    arrays = [as_array(x) for x in arrays]
    ref = arrays[0]
    ax = axis % ref.ndim
    for x in arrays[1:]:
        if x.ndim != ref.ndim or any(p != q for i, (p, q) in enumerate(zip(x.shape, ref.shape)) if i != ax):
            raise DimensionError(f"concat on axis {ax}: {ref.shape} vs {x.shape}")
    bounds = np.cumsum([x.shape[ax] for x in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_output(np.concatenate([x.data for x in arrays], axis=ax), tuple(arrays), backward, "concat")


def concat_channels(a, b) -> NDArray:
    a, b = as_array(a), as_array(b)
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError(f"concat_channels needs NCHW inputs, got {a.shape} and {b.shape}")
    mismatch = [ax for ax in (0, 2, 3) if a.shape[ax] != b.shape[ax]]
    if mismatch:
        raise DimensionError(f"concat_channels: {a.shape} vs {b.shape} differ on axes {mismatch}")
    return concat([a, b], axis=1)


# ---------------------------------------------------------------------------
# activations


def relu(a) -> NDArray:
    a = as_array(a)
    mask = a.data > 0
    note_pieces(mask)
    return make_output(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def relu6(a) -> NDArray:
    a = as_array(a)
    ad = a.data
    mask = (ad > 0) & (ad < 6)
    note_pieces((ad > 0).astype(np.int8) + (ad >= 6))
    return make_output(np.clip(ad, 0, 6), (a,), lambda g: (g * mask,), "relu6")


def hardswish(a) -> NDArray:
    a = as_array(a)
    x = a.data
    note_pieces((x >= -3).astype(np.int8) + (x > 3))
    out = x * np.clip(x + 3, 0, 6) / 6

    def backward(g):
        d = np.where(x < -3, 0.0, np.where(x > 3, 1.0, (2 * x + 3) / 6)).astype(x.dtype)
        return (g * d,)

    return make_output(out.astype(x.dtype), (a,), backward, "hardswish")


def sigmoid(a) -> NDArray:
    a = as_array(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return make_output(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


_ACTIVATIONS = {"relu": relu, "relu6": relu6, "hardswish": hardswish, "sigmoid": sigmoid}


def activation(a, kind: str) -> NDArray:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(a)


def softmax(a, axis: int = -1) -> NDArray:
    a = as_array(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_output(out, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# dense layers


def matmul(a, b) -> NDArray:
    """Batched product over the last two axes; leading axes must match."""
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_output(ad @ bd, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> NDArray:
    x, weight = as_array(x), as_array(weight)
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise DimensionError(f"linear: input last axis {x.shape[-1]} != weight in-features {d_in} (axis {x.ndim - 1})")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = (x, weight)
    if bias is not None:
        bias = as_array(bias)
        if bias.shape != (d_out,):
            raise DimensionError(f"linear: bias shape {bias.shape} != ({d_out},)")
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = g @ wd if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, d_in) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_output(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# convolution


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> NDArray:
    x, weight = as_array(x), as_array(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d needs 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, c_per_group, kh, kw = weight.shape
    if padding < 0 or stride < 1:
        raise ValueError("conv2d: padding must be >= 0 and stride >= 1")
    if c_in % groups or c_out % groups:
        raise DimensionError(f"conv2d: channels {c_in}->{c_out} not divisible by groups={groups}")
    if c_in // groups != c_per_group:
        raise DimensionError(f"conv2d: input axis 1 has {c_in} channels, weight axis 1 expects {c_per_group * groups}")
    ho, wo = conv_out_size(h, kh, stride, padding), conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (axes 2, 3)")
    xd, wd = x.data, weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_array(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
        parents.append(bias)

    if kh == 1 and kw == 1 and stride == 1 and padding == 0 and groups == 1:
        out, backward = _conv1x1(xd, wd, x.requires_grad, weight.requires_grad)
    else:
        out, backward = _conv_im2col(xd, wd, stride, padding, groups, ho, wo, x.requires_grad, weight.requires_grad)
    if bias is not None:
        out += bias.data[None, :, None, None]

        def backward_with_bias(g, _inner=backward):
            return (*_inner(g), g.sum(axis=(0, 2, 3)))

        return make_output(out, parents, backward_with_bias, "conv2d")
    return make_output(out, parents, backward, "conv2d")


def _conv1x1(xd, wd, need_x, need_w):
    n, c_in, h, w = xd.shape
    c_out = wd.shape[0]
    w2 = wd.reshape(c_out, c_in)
    x3 = xd.reshape(n, c_in, h * w)
    out = np.matmul(w2, x3).reshape(n, c_out, h, w)

    def backward(g):
        g3 = g.reshape(n, c_out, h * w)
        gx = np.matmul(w2.T, g3).reshape(xd.shape) if need_x else None
        gw = np.einsum("nol,nil->oi", g3, x3, optimize=True).reshape(wd.shape) if need_w else None
        return gx, gw

    return out, backward


def _conv_im2col(xd, wd, stride, pad, groups, ho, wo, need_x, need_w):
    n, c_in, h, w = xd.shape
    c_out, cpg, kh, kw = wd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = np.empty((n, c_in, kh, kw, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    k = cpg * kh * kw
    cols_g = cols.reshape(n, groups, k, ho * wo)
    w_g = wd.reshape(groups, c_out // groups, k)
    out = np.matmul(w_g[None], cols_g).reshape(n, c_out, ho, wo)

    def backward(g):
        g_g = g.reshape(n, groups, c_out // groups, ho * wo)
        gw = gx = None
        if need_w:
            gw = np.einsum("ngol,ngkl->gok", g_g, cols_g, optimize=True).reshape(wd.shape)
        if need_x:
            gcols = np.matmul(np.swapaxes(w_g, 1, 2)[None], g_g).reshape(n, c_in, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw

    return out, backward


def depthwise_conv2d(x, weight, bias=None, padding: int = 3) -> NDArray:
    """Per-channel stride-1 convolution (conv2d with groups == C)."""
    x, weight = as_array(x), as_array(weight)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1] != 1:
        raise DimensionError(f"depthwise_conv2d: input {x.shape}, weight {weight.shape} (want [C,1,k,k])")
    n, c, h, w = x.shape
    if weight.shape[0] != c:
        raise DimensionError(f"depthwise_conv2d: input axis 1 has {c} channels, weight axis 0 has {weight.shape[0]}")
    kh, kw = weight.shape[2:]
    ho, wo = conv_out_size(h, kh, 1, padding), conv_out_size(w, kw, 1, padding)
    if ho < 1 or wo < 1:
        raise DimensionError("depthwise_conv2d: kernel larger than padded input (axes 2, 3)")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    k = np.ascontiguousarray(weight.data[:, 0])
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    _kernels.dw_forward(xp, k, out)
    parents = [x, weight]
    if bias is not None:
        bias = as_array(bias)
        if bias.shape != (c,):
            raise DimensionError(f"depthwise_conv2d: bias shape {bias.shape} != ({c},)")
        out += bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            _kernels.dw_grad_input(g, k, gxp)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if weight.requires_grad:
            gk = np.zeros(k.shape, dtype=x.dtype)
            _kernels.dw_grad_weight(g, xp, gk)
            gw = gk[:, None]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_output(out, parents, backward, "depthwise_conv2d")


# ---------------------------------------------------------------------------
# normalization, pooling, resampling


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray, training: bool,
               eps: float = 1e-5, momentum: float = 0.1) -> NDArray:
    """Per-channel normalization of an [N, C, H, W] array.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is conventional)."""
    x, gamma, beta = as_array(x), as_array(gamma), as_array(beta)
    if x.ndim != 4:
        raise DimensionError(f"batch_norm needs NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: gamma/beta {gamma.shape}/{beta.shape} vs {c} channels")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    dt = xd.dtype.type
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3))
        centered = xd - mu[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv = (1.0 / np.sqrt(var + dt(eps))).astype(xd.dtype)
        xhat = centered * inv[None, :, None, None]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))

        def backward(g):
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gb = g.sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gx = (gd * inv[None, :, None, None] / m) * (
                    m * g - gb[None, :, None, None] - xhat * gg[None, :, None, None])
            return gx, gg, gb
    else:
        inv = (1.0 / np.sqrt(running_var.astype(xd.dtype) + dt(eps))).astype(xd.dtype)
        xhat = (xd - running_mean.astype(xd.dtype)[None, :, None, None]) * inv[None, :, None, None]

        def backward(g):
            gx = g * gd * inv[None, :, None, None] if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * gd + beta.data[None, :, None, None]
    return make_output(out.astype(xd.dtype), (x, gamma, beta), backward, "batch_norm")


def global_avg_pool(x) -> NDArray:
    x = as_array(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool needs NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    scale = x.dtype.type(1.0 / (h * w))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] * scale, x.shape).copy(),)

    return make_output(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def upsample_nearest2x(x) -> NDArray:
    x = as_array(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest2x needs NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_output(out, (x,), backward, "upsample_nearest2x")


