"""Feature Coupling Units: moving features between the CNN map and the token grid.

Down path (map -> tokens): 1x1 conv to E, resample to the token grid,
LayerNorm, GELU. Up path (tokens -> map): 1x1 conv to C, BatchNorm, ReLU,
resample to the map size. Resampling direction is derived from comparing
the map side with the token grid side, so a map coarser than the grid (the
last stage) is upsampled on the way down and pooled on the way up.
"""

from __future__ import annotations

import math

from . import ops
from .blocks import batch_norm, conv, layer_norm
from .config import ConfigurationError
from .params import Scope
from .tensor import ContractError, Tensor


def _ratio(size: int, grid: int) -> tuple[str, int]:
    if size >= grid:
        if size % grid:
            raise ConfigurationError("input_size", f"map {size} is not a multiple of token grid {grid}")
        return "down", size // grid
    if grid % size:
        raise ConfigurationError("input_size", f"map {size} does not divide token grid {grid}")
    return "up", grid // size


def to_patches(x: Tensor, grid: int) -> Tensor:
    """N x E x H x W map -> N x K x n x E, patch i holding the n = (H/grid)^2 pixels under token i."""
    n, e, h, w = x.shape
    r = h // grid
    return x.reshape(n, e, grid, r, grid, r).transpose(0, 2, 4, 3, 5, 1).reshape(n, grid * grid, r * r, e)


def from_patches(p: Tensor, grid: int) -> Tensor:
    n, k, m, c = p.shape
    r = math.isqrt(m)
    return p.reshape(n, grid, grid, r, r, c).transpose(0, 5, 1, 3, 2, 4).reshape(n, c, grid * r, grid * r)


def attention_weights(pc: Tensor, pt: Tensor, p: Scope) -> Tensor:
    """Softmax((Pt Wq)(Pc Wk)^T / sqrt(E)) per patch: ... x K x 1 x n."""
    e = pt.shape[-1]
    q = (pt @ p["q.weight"]).reshape(*pt.shape[:-1], 1, e)
    k = pc @ p["k.weight"]
    scores = (q @ ops.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * (1.0 / math.sqrt(e))
    return ops.softmax(scores, axis=-1)


def attention_sample_down(pc: Tensor, pt: Tensor, p: Scope) -> tuple[Tensor, Tensor]:
    """Cross-attention pooling from patch pixels into their aligned tokens.

    ``pc`` holds per-patch pixels (... x K x n x E), ``pt`` the tokens
    (... x K x E). Returns the incremented tokens and the attention weights
    (... x K x 1 x n) to be reused on the way back up.
    """
    if pc.shape[:-2] != pt.shape[:-1] or pc.shape[-1] != pt.shape[-1]:
        raise ConfigurationError("sampling", f"patch grid {pc.shape} misaligned with tokens {pt.shape}")
    w = attention_weights(pc, pt, p)
    update = (w @ (pc @ p["v.weight"])).reshape(*pt.shape)
    return pt + update, w


def attention_spread(tokens: Tensor, weights: Tensor | None) -> Tensor:
    """Transpose of the cached attention: token j -> its n pixels, ... x K x n x C."""
    if weights is None:
        raise ContractError("attention up-sampling needs the weights cached by the down pass of this step")
    wt = ops.transpose(weights, tuple(range(weights.ndim - 2)) + (weights.ndim - 1, weights.ndim - 2))
    return wt * tokens.reshape(*tokens.shape[:-1], 1, tokens.shape[-1])


def attention_sample_up(pc: Tensor, pt: Tensor, weights: Tensor | None) -> Tensor:
    """Add each processed token, weighted by the cached attention, back onto its patch pixels."""
    return pc + attention_spread(pt, weights)


def fcu_down(
    mid: Tensor,
    p: Scope,
    grid: int,
    strategy: str,
    tokens: Tensor | None = None,
    sampler: Scope | None = None,
    activation: bool = True,
) -> tuple[Tensor, Tensor | None]:
    """Map a CNN feature map to a N x K x E token increment.

    Returns ``(increment, attention_weights)``; the weights are only produced
    by the attention strategy when the map is finer than the token grid.
    """
    y = conv(mid, p.sub("conv"))
    n, e, h, _ = y.shape
    direction, r = _ratio(h, grid)
    weights = None
    if strategy == "attention":
        if tokens is None or sampler is None:
            raise ContractError("attention sampling needs the current tokens and sampler weights")
        if direction == "down":
            patches = to_patches(y, grid)
            weights = attention_weights(patches, tokens, sampler)
            pooled = (weights @ (patches @ sampler["v.weight"])).reshape(n, grid * grid, e)
        else:
            v = ops.transpose(ops.transpose(y, (0, 2, 3, 1)) @ sampler["v.weight"], (0, 3, 1, 2))
            pooled = _flatten(ops.resample_nearest(v, grid, grid))
    else:
        if direction == "down" and r > 1:
            if strategy == "conv":
                y = conv(y, p.sub("resample"), stride=r)
            else:
                y = ops.pool2d(y, "max" if strategy == "maxpool" else "avg", r, r)
        elif direction == "up":
            y = ops.resample_nearest(y, grid, grid)
            if strategy == "conv":
                y = conv(y, p.sub("resample"))
        elif strategy == "conv":
            y = conv(y, p.sub("resample"))
        pooled = _flatten(y)
    out = layer_norm(pooled, p.sub("ln"))
    if activation:
        out = ops.gelu(out)
    return out, weights


def _flatten(y: Tensor) -> Tensor:
    n, e = y.shape[:2]
    return y.reshape(n, e, -1).transpose(0, 2, 1)


def fcu_up(
    tokens: Tensor,
    p: Scope,
    size: int,
    strategy: str,
    train: bool,
    weights: Tensor | None = None,
    activation: bool = True,
) -> Tensor:
    """Map N x K x E tokens (class token excluded) to a N x C x size x size injection."""
    n, k, e = tokens.shape
    grid = math.isqrt(k)
    if grid * grid != k:
        raise ContractError(f"token count {k} is not a square grid; drop the class token before fcu_up")
    y = tokens.transpose(0, 2, 1).reshape(n, e, grid, grid)
    y = batch_norm(conv(y, p.sub("conv")), p.sub("bn"), train)
    if activation:
        y = ops.relu(y)
    direction, r = _ratio(size, grid)
    if direction == "down":
        if strategy == "attention":
            return from_patches(attention_spread(_flatten(y), weights), grid)
        return ops.resample_nearest(y, size, size) if r > 1 else y
    return ops.pool2d(y, "max" if strategy == "maxpool" else "avg", r, r)
