"""Architecture configuration and the derived block schedule."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

SAMPLING_STRATEGIES = ("avgpool", "maxpool", "conv", "attention")
BRANCHES = ("dual", "cnn_only", "transformer_only")
STAGE_LABELS = ("c2", "c3", "c4", "c5")
EXPANSION = 4
MLP_RATIO = 4


class ConfigurationError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ConformerConfig:
    name: str = "conformer_s"
    input_size: int = 224
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool: bool = True
    stem_channels: int = 64
    blocks_per_stage: tuple[int, ...] = (4, 4, 3, 1)
    n_c: int = 2
    mid_channels: tuple[int, ...] = (64, 128, 256, 256)
    embed_dim: int = 384
    num_heads: int = 6
    patch_stride: int = 4
    fusion_interval: int = 1
    sampling: str = "avgpool"
    positional_embeddings: bool = False
    num_classes: int = 1000
    fcu_activation: bool = True
    inject_before_activation: bool = True
    loss_weights: tuple[float, float] = (1.0, 1.0)
    branches: str = "dual"

    def __post_init__(self):
        for name in ("blocks_per_stage", "mid_channels", "loss_weights"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    # -- validation ---------------------------------------------------------
    def validate(self) -> None:
        def need(cond: bool, field: str, msg: str) -> None:
            if not cond:
                raise ConfigurationError(field, msg)

        need(len(self.blocks_per_stage) == 4 and all(b >= 1 for b in self.blocks_per_stage),
             "blocks_per_stage", "needs 4 positive entries")
        need(len(self.mid_channels) == 4 and all(c >= 1 for c in self.mid_channels),
             "mid_channels", "needs 4 positive entries")
        need(self.n_c >= 2, "n_c", "blocks after the first need at least 2 bottlenecks")
        need(self.embed_dim >= 1 and self.num_heads >= 1, "embed_dim", "must be positive")
        need(self.embed_dim % self.num_heads == 0, "num_heads", f"{self.embed_dim} not divisible by {self.num_heads}")
        need(self.patch_stride >= 1, "patch_stride", "must be >= 1")
        need(self.fusion_interval >= 1, "fusion_interval", "must be >= 1")
        need(self.sampling in SAMPLING_STRATEGIES, "sampling", f"must be one of {SAMPLING_STRATEGIES}")
        need(self.branches in BRANCHES, "branches", f"must be one of {BRANCHES}")
        need(self.num_classes >= 1, "num_classes", "must be >= 1")
        need(self.stem_kernel >= 1 and self.stem_stride >= 1 and self.stem_channels >= 1,
             "stem_kernel", "stem geometry must be positive")
        need(len(self.loss_weights) == 2 and all(w >= 0 for w in self.loss_weights),
             "loss_weights", "needs two non-negative weights")
        self.check_resolution(self.input_size)

    def check_resolution(self, size: int) -> None:
        """Raise unless an input of ``size`` x ``size`` yields aligned grids at every stage."""
        if size < 1:
            raise ConfigurationError("input_size", "must be positive")
        stem = self.stem_out_size(size)
        if stem < 1 or stem % self.patch_stride:
            raise ConfigurationError(
                "input_size", f"stem output {stem} is not divisible by patch_stride {self.patch_stride}")
        grid = stem // self.patch_stride
        for label, s in zip(STAGE_LABELS, self.stage_sizes(size)):
            if not (s % grid == 0 or grid % s == 0):
                raise ConfigurationError(
                    "input_size", f"stage {label} map {s}x{s} is neither a multiple nor a divisor of token grid {grid}")

    # -- derived geometry ---------------------------------------------------
    @property
    def depth(self) -> int:
        return sum(self.blocks_per_stage)

    @property
    def out_channels(self) -> tuple[int, ...]:
        return tuple(EXPANSION * c for c in self.mid_channels)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def has_cnn(self) -> bool:
        return self.branches in ("dual", "cnn_only")

    @property
    def has_transformer(self) -> bool:
        return self.branches in ("dual", "transformer_only")

    @property
    def has_fcu(self) -> bool:
        return self.branches == "dual"

    def stem_out_size(self, size: int) -> int:
        pad = self.stem_kernel // 2
        s = (size + 2 * pad - self.stem_kernel) // self.stem_stride + 1
        if self.stem_pool:
            s = (s + 2 - 3) // 2 + 1
        return s

    def stage_sizes(self, size: int) -> list[int]:
        s = self.stem_out_size(size)
        sizes = [s]
        for _ in range(3):
            s = (s + 2 - 3) // 2 + 1
            sizes.append(s)
        return sizes

    def token_grid(self, size: int | None = None) -> int:
        size = self.input_size if size is None else size
        return self.stem_out_size(size) // self.patch_stride

    def num_tokens(self, size: int | None = None) -> int:
        return self.token_grid(size) ** 2 + 1

    def is_fusion_block(self, index: int) -> bool:
        """Blocks are numbered from 1; block 1 never couples."""
        return index >= 2 and (index - 1) % self.fusion_interval == 0

    def blocks(self) -> list["BlockSpec"]:
        specs = []
        index = 0
        cin = self.stem_channels
        for stage, count in enumerate(self.blocks_per_stage):
            mid, cout = self.mid_channels[stage], self.out_channels[stage]
            for j in range(count):
                index += 1
                prefix = f"{STAGE_LABELS[stage]}.block{index:02d}"
                if index == 1:
                    specs.append(BlockSpec(index, stage, (BottleneckSpec(f"{prefix}.bneck1", cin, mid, cout, 1),),
                                           fusion=False))
                    cin = cout
                    continue
                stride = 2 if (j == 0 and stage > 0) else 1
                fusion = self.is_fusion_block(index)
                necks = [BottleneckSpec(f"{prefix}.bneck1", cin, mid, cout, stride)]
                if fusion:
                    necks.append(BottleneckSpec(f"{prefix}.bneck2", cout, mid, cout, 1))
                for k in range(self.n_c - 2):
                    necks.append(BottleneckSpec(f"{prefix}.bneck{k + 3}", cout, mid, cout, 1))
                specs.append(BlockSpec(index, stage, tuple(necks), fusion=fusion))
                cin = cout
        return specs

    # -- serialisation ------------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("blocks_per_stage", "mid_channels", "loss_weights"):
            d[k] = list(d[k])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict) -> "ConformerConfig":
        names = [f.name for f in fields(cls)]
        unknown = sorted(set(data) - set(names))
        if unknown:
            raise ConfigurationError(unknown[0], "unknown configuration key")
        missing = [n for n in names if n not in data]
        if missing:
            raise ConfigurationError(missing[0], "missing configuration key")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ConformerConfig":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> "ConformerConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class BottleneckSpec:
    name: str
    cin: int
    mid: int
    cout: int
    stride: int

    @property
    def projection(self) -> bool:
        return self.cin != self.cout or self.stride != 1


@dataclass(frozen=True)
class BlockSpec:
    index: int
    stage: int
    bottlenecks: tuple[BottleneckSpec, ...]
    fusion: bool

    @property
    def label(self) -> str:
        return STAGE_LABELS[self.stage]

    @property
    def mid(self) -> int:
        return self.bottlenecks[0].mid


def degenerate(config: ConformerConfig, which: str) -> ConformerConfig:
    """Drop one branch (and every FCU): ``cnn_only`` or ``transformer_only``."""
    if which not in ("cnn_only", "transformer_only"):
        raise ValueError(f"unknown degeneration {which!r}")
    base = config.name.split(":")[0]
    return config.replace(branches=which, name=f"{base}:{which}")


CANONICAL = ("conformer_ti", "conformer_s", "conformer_s32", "conformer_b", "micro")


def load_config(path_or_name: str | Path) -> ConformerConfig:
    """Load a JSON config from a path, or one of the shipped files by name."""
    p = Path(path_or_name)
    if p.is_file():
        return ConformerConfig.from_json(p.read_text())
    name = p.name[:-5] if p.name.endswith(".json") else p.name
    if name in CANONICAL:
        text = resources.files("conformer.configs").joinpath(f"{name}.json").read_text()
        return ConformerConfig.from_json(text)
    raise FileNotFoundError(f"no config file or shipped config named {str(path_or_name)!r}")


def save_config(config: ConformerConfig, path: str | Path) -> None:
    Path(path).write_text(config.to_json() + "\n")
