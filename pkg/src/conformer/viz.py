"""Heatmaps (CAM, attention rollout, feature maps), PNG/TNSR writers and a throughput bench."""

from __future__ import annotations

import fnmatch
import os
import platform
import re
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .config import ConformerConfig
from .model import Conformer, ForwardResult, forward
from .ops import nearest_indices
from .tensor import ContractError

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1


@dataclass
class Heatmap:
    """An H x W map in [0, 1] and where it came from (``cam``, ``rollout``, ``featmap:<tap>``)."""

    values: np.ndarray
    tag: str
    raw: np.ndarray | None = field(default=None, repr=False)


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if not hi > lo:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def upsample_nearest(values: np.ndarray, size: int) -> np.ndarray:
    h, w = values.shape
    return values[np.ix_(nearest_indices(h, size), nearest_indices(w, size))]


# -- class activation maps ---------------------------------------------------------

def cam_from_features(features: np.ndarray, class_weights: np.ndarray, size: int) -> Heatmap:
    """``features`` C x h x w, ``class_weights`` C: weighted channel sum, ReLU, normalize, upsample."""
    raw = np.maximum(np.tensordot(class_weights.astype(np.float64), features.astype(np.float64), axes=1), 0.0)
    return Heatmap(upsample_nearest(normalize_map(raw), size), "cam", raw)


def cam(model: Conformer, image: np.ndarray, class_index: int, result: ForwardResult | None = None) -> Heatmap:
    """Class activation map of one 3 x S x S image from the last CNN stage."""
    cfg = model.config
    if not cfg.has_cnn:
        raise ContractError("CAM needs a CNN head; this configuration is transformer-only")
    if not 0 <= int(class_index) < cfg.num_classes or int(class_index) != class_index:
        raise ValueError(f"class index {class_index} out of range [0, {cfg.num_classes})")
    if result is None:
        result = forward(model, image[None], "eval", taps=True)
    if "c5" not in result.taps:
        raise ContractError("forward result carries no c5 tap; run forward with taps=True")
    features = result.taps["c5"].data[0]
    weights = model.params["cnn.head.fc.weight"].data[:, int(class_index)]
    return cam_from_features(features, weights, image.shape[-1])


@dataclass
class BoxMass:
    inside_mean: float
    outside_mean: float
    inside_fraction: float

    @property
    def concentrated(self) -> bool:
        """Heat per pixel is higher inside the box than outside it."""
        return self.inside_mean > self.outside_mean


def box_mass(heat: np.ndarray, box) -> BoxMass:
    """Heat statistics for an (x0, y0, x1, y1) box, end exclusive."""
    x0, y0, x1, y1 = (int(v) for v in box)
    mask = np.zeros(heat.shape, dtype=bool)
    mask[y0:y1, x0:x1] = True
    total = float(heat.sum())
    inside = float(heat[mask].mean()) if mask.any() else 0.0
    outside = float(heat[~mask].mean()) if (~mask).any() else 0.0
    return BoxMass(inside, outside, float(heat[mask].sum()) / total if total > 0 else 0.0)


# -- attention rollout -------------------------------------------------------------

def rollout_matrices(attentions: list[np.ndarray]) -> list[np.ndarray]:
    """Cumulative rollout after each block.

    Each attention is heads x T x T (or T x T). Per block: mean over heads,
    add the identity, renormalize rows; block products accumulate as
    ``R_l = A_l @ R_{l-1}``.
    """
    if not attentions:
        raise ContractError("attention rollout needs at least one attention map")
    out = []
    joint = None
    for a in attentions:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 3:
            a = a.mean(axis=0)
        a = a + np.eye(a.shape[-1])
        a = a / a.sum(axis=-1, keepdims=True)
        joint = a if joint is None else a @ joint
        out.append(joint)
    return out


def rollout_map(attentions: list[np.ndarray], grid: int, size: int) -> Heatmap:
    joint = rollout_matrices(attentions)[-1]
    raw = joint[0, 1:].reshape(grid, grid)
    return Heatmap(upsample_nearest(normalize_map(raw), size), "rollout", raw)


def attention_taps(result: ForwardResult, sample: int = 0) -> list[np.ndarray]:
    keys = sorted(k for k in result.taps if re.fullmatch(r"block\d+\.attention", k))
    if not keys:
        raise ContractError("no attention taps recorded; re-run forward with taps=True")
    return [result.taps[k].data[sample] for k in keys]


def attention_rollout(model: Conformer, image: np.ndarray, result: ForwardResult | None = None,
                      taps: bool = True) -> Heatmap:
    """Rollout of the class token over the spatial tokens of one 3 x S x S image."""
    cfg = model.config
    if not cfg.has_transformer:
        raise ContractError("attention rollout needs a transformer branch")
    if result is None:
        if not taps:
            raise ContractError("attention taps are disabled; re-run with taps enabled to compute a rollout")
        result = forward(model, image[None], "eval", taps=True)
    size = image.shape[-1]
    return rollout_map(attention_taps(result), cfg.token_grid(size), size)


# -- feature maps -------------------------------------------------------------------

def feature_map(tap: np.ndarray, tag: str, size: int) -> Heatmap:
    """Channel mean of a C x h x w map, or token L2 norm of a T x E sequence (class token dropped)."""
    tap = np.asarray(tap, dtype=np.float64)
    if tap.ndim == 2:
        tokens = tap[1:]
        grid = int(round(np.sqrt(len(tokens))))
        if grid * grid != len(tokens):
            raise ContractError(f"tap {tag} has {len(tokens)} spatial tokens, not a square grid")
        raw = np.linalg.norm(tokens, axis=-1).reshape(grid, grid)
    elif tap.ndim == 3:
        raw = tap.mean(axis=0)
    else:
        raise ContractError(f"tap {tag} has unsupported shape {tap.shape}")
    return Heatmap(upsample_nearest(normalize_map(raw), size), f"featmap:{tag}", raw)


def select_taps(taps: dict, selector: str) -> list[str]:
    """Tap names matching a comma-separated list of names or shell-style patterns."""
    names = []
    for part in selector.split(","):
        part = part.strip()
        hits = [k for k in taps if fnmatch.fnmatchcase(k, part) and not k.endswith(".attention")]
        if not hits:
            raise ValueError(f"selector {part!r} matches no tap; available: {', '.join(sorted(taps))}")
        names += [k for k in hits if k not in names]
    return names


def export_feature_maps(model: Conformer, image: np.ndarray, selector: str, out_dir: str | Path | None = None,
                        raw: bool = True, overlay: bool = False) -> dict[str, Heatmap]:
    """Heatmaps for the selected taps of one image, written as PNG (and TNSR) files when ``out_dir`` is set."""
    result = forward(model, image[None], "eval", taps=True)
    size = image.shape[-1]
    maps = {}
    for name in select_taps(result.taps, selector):
        hm = feature_map(result.taps[name].data[0], name, size)
        maps[name] = hm
        if out_dir is not None:
            write_heatmap(Path(out_dir) / f"{name}.png", hm, image if overlay else None)
            if raw:
                write_tnsr(Path(out_dir) / f"{name}.tnsr", result.taps[name].data[0])
    return maps


# -- file writers -------------------------------------------------------------------

def to_rgb(values: np.ndarray, cmap: str = "viridis") -> np.ndarray:
    """H x W in [0, 1] to H x W x 3 uint8."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    if cmap == "gray":
        g = np.round(v * 255).astype(np.uint8)
        return np.repeat(g[..., None], 3, axis=-1)
    lut = np.round(colormaps[cmap](np.linspace(0.0, 1.0, 256))[:, :3] * 255).astype(np.uint8)
    return lut[np.round(v * 255).astype(np.int64)]


def image_rgb(image: np.ndarray) -> np.ndarray:
    """A normalized 3 x S x S input rescaled for display."""
    return np.round(normalize_map(image).transpose(1, 2, 0) * 255).astype(np.uint8)


def compose(heat: Heatmap, image: np.ndarray | None = None, alpha: float = 0.4, cmap: str = "viridis") -> np.ndarray:
    rgb = to_rgb(heat.values, cmap)
    if image is None:
        return rgb
    base = image_rgb(image).astype(np.float64)
    return np.round((1 - alpha) * base + alpha * rgb).astype(np.uint8)


def write_png(path: str | Path, pixels: np.ndarray) -> None:
    """8-bit PNG without metadata, so identical pixels give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "L" if pixels.ndim == 2 else "RGB"
    Image.fromarray(np.ascontiguousarray(pixels), mode=mode).save(path, format="PNG", optimize=False)


def write_heatmap(path: str | Path, heat: Heatmap, image: np.ndarray | None = None, cmap: str = "viridis") -> None:
    if cmap == "gray" and image is None:
        write_png(path, np.round(np.clip(heat.values, 0, 1) * 255).astype(np.uint8))
    else:
        write_png(path, compose(heat, image, cmap=cmap))


def write_tnsr(path: str | Path, array: np.ndarray) -> None:
    """b"TNSR" | u32 version | u8 rank | rank x u64 dims | little-endian f32 payload."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(TNSR_MAGIC + struct.pack(f"<IB{arr.ndim}Q", TNSR_VERSION, arr.ndim, *arr.shape) + arr.tobytes())


def read_tnsr(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != TNSR_MAGIC or len(data) < 9:
        raise ValueError(f"{path} is not a TNSR file")
    version, rank = struct.unpack_from("<IB", data, 4)
    if version != TNSR_VERSION:
        raise ValueError(f"unsupported TNSR version {version}")
    dims = struct.unpack_from(f"<{rank}Q", data, 9)
    start = 9 + 8 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) != start + 4 * count:
        raise ValueError(f"{path}: payload size does not match its shape {dims}")
    return np.frombuffer(data, dtype="<f4", offset=start).astype(np.float32).reshape(dims)


# -- throughput ---------------------------------------------------------------------

@dataclass
class BenchResult:
    config: str
    batch: int
    images_per_second: float
    per_iteration: list[float]
    hardware: str


def hardware_string() -> str:
    from threadpoolctl import threadpool_info

    blas = [f"{i.get('internal_api')} {i.get('version')} x{i.get('num_threads')}" for i in threadpool_info()]
    cpu = platform.processor() or platform.machine()
    return f"{cpu}, {os.cpu_count()} cpus, {platform.system()} {platform.release()}, " \
           f"numpy {np.__version__}, {'; '.join(blas) or 'no BLAS info'}"


def bench(config: ConformerConfig, batch: int = 8, iters: int = 5, warmup_iters: int = 1, seed: int = 0,
          model: Conformer | None = None) -> BenchResult:
    """Median eval-mode forward throughput in images per second."""
    if batch < 1 or iters < 1 or warmup_iters < 0:
        raise ValueError("batch and iters must be >= 1, warmup_iters >= 0")
    model = model or Conformer.create(config, seed)
    x = np.random.default_rng(seed).standard_normal((batch, 3, config.input_size, config.input_size)).astype(
        np.float32)
    for _ in range(warmup_iters):
        forward(model, x, "eval")
    rates = []
    for _ in range(iters):
        t = time.perf_counter()
        forward(model, x, "eval")
        rates.append(batch / (time.perf_counter() - t))
    return BenchResult(config.name, batch, float(np.median(rates)), rates, hardware_string())
