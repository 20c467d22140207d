"""Dual-branch network assembly: parameter creation and the forward pass."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .blocks import (
    bottleneck_forward,
    cnn_head,
    patch_embed,
    stem_forward,
    trans_head,
    transformer_block_forward,
)
from .config import MLP_RATIO, STAGE_LABELS, ConfigurationError, ConformerConfig
from .fcu import _ratio, fcu_down, fcu_up
from .params import ModelParams
from .tensor import ContractError, Tensor, default_dtype, name_scope

NO_DECAY_SUFFIXES = ("cls_token", "pos_embed")


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per parameter, so sub-models share values with the full model."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def is_norm_param(name: str) -> bool:
    parts = name.split(".")
    return len(parts) >= 2 and (parts[-2].startswith(("bn", "ln")) or parts[-2] == "norm")


def decays(name: str) -> bool:
    """Whether AdamW weight decay applies to this parameter."""
    return not (is_norm_param(name) or name.endswith(NO_DECAY_SUFFIXES))


class _Builder:
    def __init__(self, seed: int, dtype):
        self.seed = seed
        self.dtype = dtype
        self.tensors: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _add(self, name: str, value: np.ndarray) -> None:
        if name in self.tensors:
            raise ContractError(f"duplicate parameter {name}")
        self.tensors[name] = Tensor(value.astype(self.dtype), requires_grad=True, name=name)

    def conv(self, name: str, cout: int, cin: int, k: int, bias: bool) -> None:
        std = np.sqrt(2.0 / (cout * k * k))
        self._add(f"{name}.weight", param_rng(self.seed, f"{name}.weight").standard_normal((cout, cin, k, k)) * std)
        if bias:
            self._add(f"{name}.bias", np.zeros(cout))

    def linear(self, name: str, fin: int, fout: int, bias: bool = True) -> None:
        self._add(f"{name}.weight", trunc_normal(param_rng(self.seed, f"{name}.weight"), (fin, fout)))
        if bias:
            self._add(f"{name}.bias", np.zeros(fout))

    def norm(self, name: str, c: int, running: bool) -> None:
        self._add(f"{name}.weight", np.ones(c))
        self._add(f"{name}.bias", np.zeros(c))
        if running:
            self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=self.dtype)
            self.buffers[f"{name}.running_var"] = np.ones(c, dtype=self.dtype)

    def token(self, name: str, shape) -> None:
        self._add(name, trunc_normal(param_rng(self.seed, name), shape))


def _bottleneck_params(b: _Builder, spec, prefix: str) -> None:
    b.conv(f"{prefix}.conv1", spec.mid, spec.cin, 1, bias=False)
    b.norm(f"{prefix}.bn1", spec.mid, running=True)
    b.conv(f"{prefix}.conv2", spec.mid, spec.mid, 3, bias=False)
    b.norm(f"{prefix}.bn2", spec.mid, running=True)
    b.conv(f"{prefix}.conv3", spec.cout, spec.mid, 1, bias=False)
    b.norm(f"{prefix}.bn3", spec.cout, running=True)
    if spec.projection:
        b.conv(f"{prefix}.shortcut.conv", spec.cout, spec.cin, 1, bias=False)
        b.norm(f"{prefix}.shortcut.bn", spec.cout, running=True)


def fcu_prefix(block) -> str:
    return f"fcu.{block.label}.block{block.index:02d}"


def build_model(config: ConformerConfig, seed: int = 0) -> ModelParams:
    """Create every parameter and BatchNorm buffer for ``config``, deterministically from ``seed``."""
    config.validate()
    b = _Builder(seed, default_dtype())
    e = config.embed_dim
    b.conv("stem.conv", config.stem_channels, 3, config.stem_kernel, bias=False)
    b.norm("stem.bn", config.stem_channels, running=True)

    if config.has_transformer:
        b.conv("trans.patch_embed", e, config.stem_channels, config.patch_stride, bias=True)
        b.token("trans.cls_token", (1, 1, e))
        if config.positional_embeddings:
            b.token("trans.pos_embed", (1, config.num_tokens(), e))

    grid = config.token_grid()
    sizes = config.stage_sizes(config.input_size)
    samplers: set[str] = set()
    for block in config.blocks():
        if config.has_cnn:
            for spec in block.bottlenecks:
                _bottleneck_params(b, spec, f"cnn.{spec.name}")
        if config.has_transformer:
            t = f"trans.block{block.index:02d}"
            b.norm(f"{t}.ln1", e, running=False)
            for role in ("q", "k", "v", "proj"):
                # softmax over keys is invariant to a key bias, so it would only ever get zero gradient
                b.linear(f"{t}.attn.{role}", e, e, bias=role != "k")
            b.norm(f"{t}.ln2", e, running=False)
            b.linear(f"{t}.mlp.fc1", e, MLP_RATIO * e)
            b.linear(f"{t}.mlp.fc2", MLP_RATIO * e, e)
        if config.has_fcu and block.fusion:
            f = fcu_prefix(block)
            mid = block.mid
            b.conv(f"{f}.down.conv", e, mid, 1, bias=True)
            if config.sampling == "conv":
                direction, r = _ratio(sizes[block.stage], grid)
                b.conv(f"{f}.down.resample", e, e, r if direction == "down" else 1, bias=True)
            b.norm(f"{f}.down.ln", e, running=False)
            b.conv(f"{f}.up.conv", mid, e, 1, bias=True)
            b.norm(f"{f}.up.bn", mid, running=True)
            if config.sampling == "attention" and block.label not in samplers:
                samplers.add(block.label)
                for role in ("q", "k", "v"):
                    b.linear(f"fcu.{block.label}.sampler.{role}", e, e, bias=False)

    if config.has_transformer:
        b.norm("trans.head.norm", e, running=False)
        b.linear("trans.head.fc", e, config.num_classes)
    if config.has_cnn:
        b.linear("cnn.head.fc", config.out_channels[-1], config.num_classes)
    return ModelParams(b.tensors, b.buffers)


@dataclass
class Conformer:
    config: ConformerConfig
    params: ModelParams

    @classmethod
    def create(cls, config: ConformerConfig, seed: int = 0) -> "Conformer":
        return cls(config, build_model(config, seed))


@dataclass
class ForwardResult:
    cnn_logits: Tensor | None
    trans_logits: Tensor | None
    taps: dict[str, Tensor] = field(default_factory=dict)

    def predict(self) -> np.ndarray:
        return predict(self.cnn_logits, self.trans_logits)


def _data(x) -> np.ndarray | None:
    if x is None:
        return None
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def predict(cnn_logits, trans_logits) -> np.ndarray:
    """Summed class scores of whichever heads are present."""
    parts = [p for p in (_data(cnn_logits), _data(trans_logits)) if p is not None]
    if not parts:
        raise ContractError("predict needs at least one set of logits")
    return parts[0] + parts[1] if len(parts) == 2 else parts[0].copy()


def check_input_size(config: ConformerConfig, size: int) -> None:
    if config.positional_embeddings and config.has_transformer and size != config.input_size:
        raise ConfigurationError(
            "input_size",
            f"positional embeddings are fixed to {config.input_size}x{config.input_size}; got {size}. "
            "Interpolating them is not supported for this model family; disable positional_embeddings "
            "to run at other resolutions")
    config.check_resolution(size)


def forward(model: Conformer, images, mode: str = "eval", taps: bool = False) -> ForwardResult:
    """Run both branches. ``mode`` selects batch (train) or running (eval) BatchNorm statistics.

    With ``taps`` set the result carries intermediate maps keyed by name:
    ``stem``, ``c2``..``c5``, ``blockNN.tap``, ``blockNN.tokens_pre``,
    ``blockNN.tokens_post``, ``blockNN.attention`` and ``trans.final``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg, p = model.config, model.params
    train = mode == "train"
    x_in = ops.as_tensor(images)
    if x_in.ndim != 4 or x_in.shape[2] != x_in.shape[3]:
        raise ConfigurationError("input_size", f"expected N x 3 x S x S images, got {x_in.shape}")
    size = x_in.shape[-1]
    check_input_size(cfg, size)
    grid = cfg.token_grid(size)
    out: dict[str, Tensor] = {}

    def keep(name: str, value: Tensor) -> None:
        if taps:
            out[name] = value

    with name_scope("stem"):
        stem = stem_forward(x_in, p.scope("stem"), train, stride=cfg.stem_stride, pool=cfg.stem_pool)
    keep("stem", stem)

    x = stem
    tokens = None
    if cfg.has_transformer:
        with name_scope("trans.embed"):
            patches = patch_embed(stem, p.scope("trans.patch_embed"), cfg.patch_stride)
            cls = ops.mul(p["trans.cls_token"], ops.as_tensor(np.ones((patches.shape[0], 1, 1), patches.dtype)))
            tokens = ops.concat([cls, patches], axis=1)
            if cfg.positional_embeddings:
                tokens = tokens + p["trans.pos_embed"]

    blocks = cfg.blocks()
    for bi, block in enumerate(blocks):
        tag = f"block{block.index:02d}"
        fuse = cfg.has_fcu and block.fusion
        weights = None
        inj = None
        tap = None
        with name_scope(tag):
            if cfg.has_cnn:
                first = block.bottlenecks[0]
                x, tap = bottleneck_forward(x, p.scope(f"cnn.{first.name}"), train, stride=first.stride, tap=fuse,
                                            inject_before_activation=cfg.inject_before_activation)
                if tap is not None:
                    keep(f"{tag}.tap", tap)
            if cfg.has_transformer:
                keep(f"{tag}.tokens_pre", tokens)
                if fuse:
                    f = fcu_prefix(block)
                    sampler = p.scope(f"fcu.{block.label}.sampler") if cfg.sampling == "attention" else None
                    down, weights = fcu_down(tap, p.scope(f"{f}.down"), grid, cfg.sampling,
                                             tokens=tokens[:, 1:], sampler=sampler, activation=cfg.fcu_activation)
                    tokens = ops.concat([tokens[:, :1], tokens[:, 1:] + down], axis=1)
                keep(f"{tag}.tokens_post", tokens)
                res = transformer_block_forward(tokens, p.scope(f"trans.{tag}"), cfg.num_heads, return_attention=taps)
                if taps:
                    tokens, attn = res
                    out[f"{tag}.attention"] = attn
                else:
                    tokens = res
                if fuse:
                    inj = fcu_up(tokens[:, 1:], p.scope(f"{fcu_prefix(block)}.up"), tap.shape[-1], cfg.sampling,
                                 train, weights=weights, activation=cfg.fcu_activation)
            if cfg.has_cnn:
                for k, spec in enumerate(block.bottlenecks[1:]):
                    x, _ = bottleneck_forward(x, p.scope(f"cnn.{spec.name}"), train, stride=spec.stride,
                                              injected=inj if k == 0 else None,
                                              inject_before_activation=cfg.inject_before_activation)
        last_in_stage = bi + 1 == len(blocks) or blocks[bi + 1].stage != block.stage
        if cfg.has_cnn and last_in_stage:
            keep(STAGE_LABELS[block.stage], x)

    cnn_logits = trans_logits = None
    if cfg.has_cnn:
        with name_scope("cnn.head"):
            cnn_logits = cnn_head(x, p.scope("cnn.head"))
    if cfg.has_transformer:
        keep("trans.final", tokens)
        with name_scope("trans.head"):
            trans_logits = trans_head(tokens, p.scope("trans.head"))
    return ForwardResult(cnn_logits, trans_logits, out)


def fcu_param_names(params: ModelParams) -> list[str]:
    return [n for n in params.names() if n.startswith("fcu.")]


def zero_fcu_projections(params: ModelParams) -> ModelParams:
    """Copy of ``params`` with every FCU conv, sampler and norm affine zeroed, cutting all cross-branch flow."""
    out = params.copy()
    for name in fcu_param_names(out):
        out[name].data[...] = 0
    return out
