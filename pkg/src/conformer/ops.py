"""Differentiable numerical operations on :class:`~conformer.tensor.Tensor`.

Every op computes its forward value with numpy and registers a closure that
maps the output gradient to input gradients.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import DimensionError, Tensor, default_dtype, make_result, note_branch, branches_recording

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * ad / bd, bd.shape)

    return make_result(ad / bd, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return make_result(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    note_branch(mask)
    return make_result(np.maximum(a.data, 0), (a,), lambda g: (g * mask,), "relu")


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    y = (x * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype),)

    return make_result(y, (a,), backward, "gelu")


# ---------------------------------------------------------------- structural

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    src_shape, dtype = a.shape, a.dtype

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice)) or i is Ellipsis or i is None for i in idx)

    def backward(g):
        out = np.zeros(src_shape, dtype=dtype)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return make_result(a.data[index], (a,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.reshape(g, (1,) * len(shape))
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_result(np.matmul(ad, bd), (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- convolution

def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with OIHW weights."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    xd, wd = x.data, weight.data
    w2 = wd.reshape(o, ci * kh * kw)

    if kh == 1 and kw == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(w2, cols).reshape(n, o, ho, wo)

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape) if weight.requires_grad else None
        if not x.requires_grad:
            gx = None
        elif kh == 1 and kw == 1 and padding == 0:
            gcols = np.matmul(w2.T, g2).reshape(n, c, ho, wo)
            if stride > 1:
                gx = np.zeros_like(xd)
                gx[:, :, ::stride, ::stride][:, :, :ho, :wo] = gcols
            else:
                gx = gcols
        else:
            gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
        inputs.append(bias)
    return make_result(out, inputs, backward, "conv2d")


def pool2d(x, kind: str, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max or average pooling; average pooling counts padded zeros."""
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise DimensionError(f"pool kernel {kernel} larger than padded input {h}x{w}")
    ho, wo = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    xd = x.data
    fill = -np.inf if kind == "max" else 0.0
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)
    else:
        xp = xd
    hp, wp = xp.shape[2], xp.shape[3]

    if kind == "avg" and kernel == stride and padding == 0 and h % kernel == 0 and w % kernel == 0:
        out = xd.reshape(n, c, ho, kernel, wo, kernel).mean(axis=(3, 5))

        def backward(g):
            gx = np.broadcast_to((g / (kernel * kernel))[:, :, :, None, :, None], (n, c, ho, kernel, wo, kernel))
            return (gx.reshape(n, c, h, w).astype(xd.dtype),)

        return make_result(out.astype(xd.dtype), (x,), backward, "avgpool")

    if kind == "max":
        def shifted(i: int, j: int) -> np.ndarray:
            return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]

        out = shifted(0, 0).copy()
        for i in range(kernel):
            for j in range(kernel):
                if i or j:
                    np.maximum(out, shifted(i, j), out=out)

        def winners():
            # first maximal window position in row-major order, as argmax would pick
            taken = np.zeros(out.shape, dtype=bool)
            for i in range(kernel):
                for j in range(kernel):
                    sel = (shifted(i, j) == out) & ~taken
                    taken |= sel
                    yield i, j, sel

        if branches_recording():
            arg = np.zeros(out.shape, dtype=np.int16)
            for i, j, sel in winners():
                arg[sel] = i * kernel + j
            note_branch(arg)

        def backward(g):
            gxp = np.zeros((n, c, hp, wp), dtype=xd.dtype)
            for i, j, sel in winners():
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(sel, g, 0)
            return (gxp[:, :, padding:padding + h, padding:padding + w],)

        return make_result(out, (x,), backward, "maxpool")

    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    out = flat.mean(axis=-1).astype(xd.dtype)

    def backward(g):
        gxp = np.zeros((n, c, hp, wp), dtype=xd.dtype)
        gk = g / (kernel * kernel)
        for i in range(kernel):
            for j in range(kernel):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gk
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return make_result(out, (x,), backward, "avgpool")


def nearest_indices(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def _scatter_rows(g: np.ndarray, idx: np.ndarray, size: int, axis: int) -> np.ndarray:
    uniq, starts = np.unique(idx, return_index=True)
    partial = np.add.reduceat(g, starts, axis=axis)
    shape = list(g.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=g.dtype)
    sl = [slice(None)] * g.ndim
    sl[axis] = uniq
    out[tuple(sl)] = partial
    return out


def resample_nearest(x, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbour resize; output pixel i reads source floor(i*H/outH)."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x
    ih, iw = nearest_indices(h, out_h), nearest_indices(w, out_w)
    out = x.data[:, :, ih][:, :, :, iw]

    def backward(g):
        g = _scatter_rows(g, iw, w, axis=3)
        return (_scatter_rows(g, ih, h, axis=2),)

    return make_result(out, (x,), backward, "resample_nearest")


# ---------------------------------------------------------------- normalisation, softmax, loss

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_result(y, (x,), backward, "log_softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    e = x.shape[-1]
    if gamma.shape != (e,) or beta.shape != (e,):
        raise DimensionError(f"layer_norm affine shape {gamma.shape} does not match last dim {e}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    y = xhat * gd + beta.data
    red = tuple(range(xd.ndim - 1))

    def backward(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(y.astype(xd.dtype), (x, gamma, beta), backward, "layer_norm")


def _channel_sum(a: np.ndarray) -> np.ndarray:
    """Sum an N x C x H x W array to C values, reducing the contiguous spatial axis first."""
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, eps: float = 1e-5, momentum: float = 0.1):
    """Per-channel normalisation of NCHW input.

    Returns ``(y, new_running_mean, new_running_var)``; in eval mode the
    running statistics are returned unchanged.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or running_mean.shape != (c,):
        raise DimensionError(f"batch_norm expects {c} channels, got {gamma.shape}")
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    m = n * h * w
    if training:
        mu = (_channel_sum(xd) / m).reshape(1, c, 1, 1)
        xc = xd - mu
        var = (_channel_sum(xc * xc) / m).reshape(1, c, 1, 1)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        unbiased = var.reshape(c) * (m / max(m - 1, 1))
        new_mean = ((1 - momentum) * running_mean + momentum * mu.reshape(c)).astype(running_mean.dtype)
        new_var = ((1 - momentum) * running_var + momentum * unbiased).astype(running_var.dtype)

        def backward(g):
            s1 = _channel_sum(g)
            s2 = _channel_sum(g * xhat)
            scale = (gd * rstd).astype(xd.dtype)
            dx = scale * (g - (s1 / m).reshape(1, c, 1, 1) - xhat * (s2 / m).reshape(1, c, 1, 1))
            return dx, s2, s1
    else:
        rstd = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(xd.dtype)
        xhat = (xd - running_mean.reshape(1, c, 1, 1).astype(xd.dtype)) * rstd
        new_mean, new_var = running_mean, running_var

        def backward(g):
            return g * (gd * rstd), _channel_sum(g * xhat), _channel_sum(g)

    y = xhat * gd + beta.data.reshape(1, c, 1, 1)
    return make_result(y.astype(xd.dtype), (x, gamma, beta), backward, "batch_norm"), new_mean, new_var
