"""Closed-form parameter and MAC accounting for a configuration.

Nothing here allocates model tensors: counts come from the block schedule
and layer shapes alone, so they can be cross-checked against a built
parameter store. Module keys match parameter-name prefixes
(``cnn.c3.block05``, ``trans.block05``, ``fcu.c3.block05`` ...).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .config import MLP_RATIO, STAGE_LABELS, ConfigurationError, ConformerConfig, degenerate, load_config


@dataclass
class AuditReport:
    config_name: str
    input_size: int
    params: dict[str, int] = field(default_factory=dict)
    macs: dict[str, int] = field(default_factory=dict)
    stage_shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    def _sum(self, table: dict[str, int], pred) -> int:
        return sum(v for k, v in table.items() if pred(k))

    @property
    def cnn_side_params(self) -> int:
        """Stem, CNN branch, FCUs and the CNN classifier."""
        return self._sum(self.params, lambda k: not k.startswith("trans."))

    @property
    def transformer_side_params(self) -> int:
        """Patch embedding, class token, transformer blocks and the transformer classifier."""
        return self._sum(self.params, lambda k: k.startswith("trans."))

    @property
    def head_params(self) -> int:
        return self._sum(self.params, lambda k: k in ("cnn.head", "trans.head"))

    @property
    def fcu_params(self) -> int:
        return self._sum(self.params, lambda k: k.startswith("fcu."))

    @property
    def p_p(self) -> float:
        t = self.transformer_side_params
        return self.cnn_side_params / t if t else float("inf")

    def grouped(self, table: str = "params") -> dict[str, int]:
        """Stage-level aggregation: ``stem``, ``cnn.c2``..``c5``, ``fcu.c2``.., ``trans.blocks``, heads."""
        out: dict[str, int] = {}
        for k, v in getattr(self, table).items():
            parts = k.split(".")
            if parts[0] in ("cnn", "fcu") and parts[1] in STAGE_LABELS:
                g = f"{parts[0]}.{parts[1]}"
            elif parts[0] == "trans" and parts[1].startswith("block"):
                g = "trans.blocks"
            elif parts[0] == "trans" and parts[1] in ("patch_embed", "cls_token", "pos_embed"):
                g = "trans.embed"
            else:
                g = k
            out[g] = out.get(g, 0) + v
        return out

    def summary(self) -> dict:
        return {
            "config": self.config_name,
            "input_size": self.input_size,
            "params": self.total_params,
            "macs": self.total_macs,
            "cnn_side_params": self.cnn_side_params,
            "transformer_side_params": self.transformer_side_params,
            "head_params": self.head_params,
            "fcu_params": self.fcu_params,
            "p_p": self.p_p,
            "modules": self.grouped("params"),
            "module_macs": self.grouped("macs"),
            "stage_shapes": {k: list(v) for k, v in self.stage_shapes.items()},
        }

    def format(self) -> str:
        lines = [f"audit {self.config_name} @ {self.input_size}x{self.input_size}"]
        mp, mm = self.grouped("params"), self.grouped("macs")
        width = max(len(k) for k in mp) + 2
        lines.append(f"{'module':<{width}}{'params':>14}{'MACs':>16}")
        for k in mp:
            lines.append(f"{k:<{width}}{mp[k]:>14,}{mm.get(k, 0):>16,}")
        lines.append(f"{'total':<{width}}{self.total_params:>14,}{self.total_macs:>16,}")
        lines.append(f"params {self.total_params / 1e6:.2f} M, MACs {self.total_macs / 1e9:.2f} G, "
                     f"cnn side {self.cnn_side_params / 1e6:.2f} M, transformer side "
                     f"{self.transformer_side_params / 1e6:.2f} M, p_p {self.p_p:.3f}")
        for k, v in self.stage_shapes.items():
            lines.append(f"  {k:<8} {' x '.join(str(d) for d in v)}")
        return "\n".join(lines)


def _conv(cin: int, cout: int, k: int, bias: bool) -> int:
    return cin * cout * k * k + (cout if bias else 0)


def conv_macs(cin: int, cout: int, k: int, h_out: int, w_out: int | None = None) -> int:
    """Multiply-accumulates of one dense conv: Cin * Cout * k * k per output pixel."""
    return cin * cout * k * k * h_out * (h_out if w_out is None else w_out)


def _bottleneck(cin: int, mid: int, cout: int, projection: bool) -> int:
    n = cin * mid + 9 * mid * mid + mid * cout + 2 * (mid + mid + cout)
    if projection:
        n += cin * cout + 2 * cout
    return n


def _bottleneck_macs(cin: int, mid: int, cout: int, h_in: int, h_out: int, projection: bool) -> int:
    n = conv_macs(cin, mid, 1, h_in) + conv_macs(mid, mid, 3, h_out) + conv_macs(mid, cout, 1, h_out)
    if projection:
        n += conv_macs(cin, cout, 1, h_out)
    return n


def transformer_block_params(e: int) -> int:
    return 4 * e * e + 3 * e + 2 * (2 * e) + (e * MLP_RATIO * e + MLP_RATIO * e) + (MLP_RATIO * e * e + e)


def transformer_block_macs(tokens: int, e: int) -> int:
    return 4 * tokens * e * e + 2 * tokens * tokens * e + 2 * MLP_RATIO * tokens * e * e


def audit(config: ConformerConfig, input_size: int | None = None) -> AuditReport:
    """Parameter and MAC breakdown of ``config`` at ``input_size`` (default: the native size)."""
    size = config.input_size if input_size is None else input_size
    config.check_resolution(size)
    rep = AuditReport(config.name, size)
    P, M = rep.params, rep.macs
    e, c0 = config.embed_dim, config.stem_channels
    conv_out = (size + 2 * (config.stem_kernel // 2) - config.stem_kernel) // config.stem_stride + 1
    stage = config.stage_sizes(size)
    grid = config.token_grid(size)
    k_tok = grid * grid
    t = k_tok + 1

    P["stem"] = _conv(3, c0, config.stem_kernel, False) + 2 * c0
    M["stem"] = conv_macs(3, c0, config.stem_kernel, conv_out)
    rep.stage_shapes["stem"] = (c0, stage[0], stage[0])

    if config.has_transformer:
        P["trans.patch_embed"] = _conv(c0, e, config.patch_stride, True)
        M["trans.patch_embed"] = c0 * e * config.patch_stride ** 2 * k_tok
        P["trans.cls_token"] = e
        if config.positional_embeddings:
            P["trans.pos_embed"] = config.num_tokens() * e
        rep.stage_shapes["tokens"] = (t, e)

    h = stage[0]
    sampled: set[str] = set()
    for block in config.blocks():
        label = block.label
        h_out = stage[block.stage]
        if config.has_cnn:
            key = f"cnn.{label}.block{block.index:02d}"
            P[key] = M[key] = 0
            for spec in block.bottlenecks:
                P[key] += _bottleneck(spec.cin, spec.mid, spec.cout, spec.projection)
                M[key] += _bottleneck_macs(spec.cin, spec.mid, spec.cout, h, h_out, spec.projection)
                h = h_out
            rep.stage_shapes[label] = (config.out_channels[block.stage], h_out, h_out)
        if config.has_transformer:
            key = f"trans.block{block.index:02d}"
            P[key] = transformer_block_params(e)
            M[key] = transformer_block_macs(t, e)
        if config.has_fcu and block.fusion:
            key = f"fcu.{label}.block{block.index:02d}"
            mid = block.mid
            P[key] = _conv(mid, e, 1, True) + 2 * e + _conv(e, mid, 1, True) + 2 * mid
            M[key] = mid * e * h_out ** 2 + e * mid * k_tok
            down = h_out >= grid
            r = h_out // grid if down else 1
            if config.sampling == "conv":
                P[key] += _conv(e, e, r, True)
                M[key] += e * e * r * r * k_tok
            elif config.sampling == "attention":
                pixels = h_out ** 2
                if down:
                    # q on tokens, k and v on pixels, scores and weighted sums per pixel, spread back up
                    M[key] += k_tok * e * e + 2 * pixels * e * e + 2 * pixels * e + pixels * mid
                else:
                    M[key] += pixels * e * e
                if label not in sampled:
                    sampled.add(label)
                    P[f"fcu.{label}.sampler"] = 3 * e * e
    if config.has_transformer:
        P["trans.head"] = 2 * e + e * config.num_classes + config.num_classes
        M["trans.head"] = e * config.num_classes
    if config.has_cnn:
        c_last = config.out_channels[-1]
        P["cnn.head"] = c_last * config.num_classes + config.num_classes
        M["cnn.head"] = c_last * config.num_classes
    return rep


def count_params(config: ConformerConfig) -> int:
    return audit(config).total_params


def count_macs(config: ConformerConfig, input_size: int | None = None) -> int:
    return audit(config, input_size).total_macs


def module_of(name: str, modules) -> str:
    """Map a parameter name to the audit module key that owns it."""
    best = ""
    for m in modules:
        if (name == m or name.startswith(m + ".")) and len(m) > len(best):
            best = m
    if not best:
        raise KeyError(f"parameter {name} belongs to no audited module")
    return best


# -- comparison against the shipped reference table ---------------------------

@dataclass
class CompareRow:
    row: str
    quantity: str
    reference: float
    computed: float
    tolerance: float
    required: bool

    @property
    def rel_error(self) -> float:
        return abs(self.computed - self.reference) / abs(self.reference)

    @property
    def passed(self) -> bool:
        return self.rel_error <= self.tolerance + 1e-12


QUANTITIES = {
    "params_M": lambda r: r.total_params / 1e6,
    "macs_G": lambda r: r.total_macs / 1e9,
    "cnn_side_M": lambda r: r.cnn_side_params / 1e6,
    "transformer_side_M": lambda r: r.transformer_side_params / 1e6,
    "p_p": lambda r: r.p_p,
}


def load_reference(name: str = "reference") -> dict:
    p = Path(name)
    if p.is_file():
        return json.loads(p.read_text())
    if name not in ("reference", "paper"):
        raise FileNotFoundError(f"no reference table named {name!r}")
    return json.loads(resources.files("conformer.data").joinpath("reference.json").read_text())


def reference_config(row: dict) -> ConformerConfig:
    cfg = load_config(row["config"])
    overrides = dict(row.get("overrides", {}))
    if overrides:
        cfg = cfg.replace(**overrides)
    if row.get("degenerate"):
        cfg = degenerate(cfg, row["degenerate"])
    return cfg


def audit_compare(reference: dict | str = "reference", rows: list[str] | None = None,
                  config: ConformerConfig | None = None) -> list[CompareRow]:
    """Pair each reference cell with its computed value.

    With ``config`` given, only reference rows whose config name matches it
    are checked, and they are evaluated on that config.
    """
    ref = load_reference(reference) if isinstance(reference, str) else reference
    out = []
    for row in ref["rows"]:
        if rows is not None and row["id"] not in rows:
            continue
        if config is not None:
            if row["config"] != config.name or row.get("overrides") or row.get("degenerate"):
                continue
            cfg = config
        else:
            cfg = reference_config(row)
        rep = audit(cfg, row.get("input_size"))
        for q, spec in row["values"].items():
            if q not in QUANTITIES:
                raise ConfigurationError(q, "unknown reference quantity")
            out.append(CompareRow(row["id"], q, spec["value"], QUANTITIES[q](rep), spec["tol"],
                                  bool(spec.get("required", row.get("required", True)))))
    return out


def format_compare(rows: list[CompareRow]) -> str:
    lines = [f"{'row':<34}{'quantity':<20}{'reference':>11}{'computed':>11}{'rel.err':>9}{'tol':>7}  status"]
    for r in rows:
        status = "ok" if r.passed else ("FAIL" if r.required else "off (info)")
        lines.append(f"{r.row:<34}{r.quantity:<20}{r.reference:>11.3f}{r.computed:>11.3f}"
                     f"{r.rel_error * 100:>8.2f}%{r.tolerance * 100:>6.1f}%  {status}")
    return "\n".join(lines)

