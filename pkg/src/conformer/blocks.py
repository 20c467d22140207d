"""Reusable network units operating on scoped parameter stores.

CNN-side units use BatchNorm and ReLU; transformer-side units use
LayerNorm and GELU.
"""

from __future__ import annotations

import math

from . import ops
from .config import ConfigurationError
from .params import Scope
from .tensor import DimensionError, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-6


def batch_norm(x: Tensor, p: Scope, train: bool) -> Tensor:
    y, mean, var = ops.batch_norm(x, p["weight"], p["bias"], p.buffer("running_mean"), p.buffer("running_var"),
                                  training=train, eps=BN_EPS, momentum=BN_MOMENTUM)
    if train:
        p.set_buffer("running_mean", mean)
        p.set_buffer("running_var", var)
    return y


def layer_norm(x: Tensor, p: Scope) -> Tensor:
    return ops.layer_norm(x, p["weight"], p["bias"], eps=LN_EPS)


def linear(x: Tensor, p: Scope) -> Tensor:
    return ops.linear(x, p["weight"], p.get("bias"))


def conv(x: Tensor, p: Scope, stride: int = 1, padding: int = 0) -> Tensor:
    return ops.conv2d(x, p["weight"], p.get("bias"), stride=stride, padding=padding)


def stem_forward(image: Tensor, p: Scope, train: bool, stride: int = 2, pool: bool = True) -> Tensor:
    """Strided large-kernel conv + BN + ReLU, then 3x3/2 max pooling."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise DimensionError(f"stem expects N x 3 x H x W images, got {image.shape}")
    k = p["conv.weight"].shape[-1]
    x = ops.relu(batch_norm(conv(image, p.sub("conv"), stride=stride, padding=k // 2), p.sub("bn"), train))
    if pool:
        x = ops.pool2d(x, "max", 3, 2, 1)
    return x


def bottleneck_forward(
    x: Tensor,
    p: Scope,
    train: bool,
    stride: int = 1,
    injected: Tensor | None = None,
    tap: bool = False,
    inject_before_activation: bool = True,
) -> tuple[Tensor, Tensor | None]:
    """1x1 reduce -> 3x3 -> 1x1 expand with a residual connection.

    ``injected`` is added to the 3x3 stage, before its ReLU by default. With
    ``tap`` set the activated 3x3 output is returned as the second value.
    """
    h = ops.relu(batch_norm(conv(x, p.sub("conv1")), p.sub("bn1"), train))
    h = batch_norm(conv(h, p.sub("conv2"), stride=stride, padding=1), p.sub("bn2"), train)
    if injected is not None:
        if injected.shape != h.shape:
            raise DimensionError(f"injected shape {injected.shape} does not match 3x3 output {h.shape}")
        if inject_before_activation:
            h = ops.relu(h + injected)
        else:
            h = ops.relu(h) + injected
    else:
        h = ops.relu(h)
    mid = h if tap else None
    h = batch_norm(conv(h, p.sub("conv3")), p.sub("bn3"), train)
    if "shortcut.conv.weight" in p:
        shortcut = batch_norm(conv(x, p.sub("shortcut.conv"), stride=stride), p.sub("shortcut.bn"), train)
    else:
        shortcut = x
    return ops.relu(h + shortcut), mid


def patch_embed(x: Tensor, p: Scope, patch_stride: int) -> Tensor:
    """Non-overlapping strided conv, flattened row-major to N x K x E tokens."""
    n, _, h, w = x.shape
    if h % patch_stride or w % patch_stride:
        raise ConfigurationError("patch_stride", f"feature map {h}x{w} not divisible by {patch_stride}")
    y = conv(x, p, stride=patch_stride)
    e = y.shape[1]
    return y.reshape(n, e, -1).transpose(0, 2, 1)


def mhsa_forward(tokens: Tensor, p: Scope, num_heads: int, return_attention: bool = False):
    n, t, e = tokens.shape
    if e % num_heads:
        raise DimensionError(f"embedding {e} not divisible by {num_heads} heads")
    d = e // num_heads

    def heads(z: Tensor) -> Tensor:
        return z.reshape(n, t, num_heads, d).transpose(0, 2, 1, 3)

    q = heads(linear(tokens, p.sub("q")))
    k = heads(linear(tokens, p.sub("k")))
    v = heads(linear(tokens, p.sub("v")))
    attn = ops.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d)), axis=-1)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(n, t, e)
    out = linear(out, p.sub("proj"))
    if return_attention:
        return out, attn
    return out


def mlp_forward(tokens: Tensor, p: Scope) -> Tensor:
    return linear(ops.gelu(linear(tokens, p.sub("fc1"))), p.sub("fc2"))


def transformer_block_forward(tokens: Tensor, p: Scope, num_heads: int, return_attention: bool = False):
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x))."""
    a = mhsa_forward(layer_norm(tokens, p.sub("ln1")), p.sub("attn"), num_heads, return_attention)
    if return_attention:
        a, attn = a
    x = tokens + a
    x = x + mlp_forward(layer_norm(x, p.sub("ln2")), p.sub("mlp"))
    if return_attention:
        return x, attn
    return x


def cnn_head(feature: Tensor, p: Scope) -> Tensor:
    return linear(ops.mean(feature, axis=(2, 3)), p.sub("fc"))


def trans_head(tokens: Tensor, p: Scope) -> Tensor:
    return linear(layer_norm(tokens[:, 0], p.sub("norm")), p.sub("fc"))
