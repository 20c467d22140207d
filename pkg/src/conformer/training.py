"""Dual-loss training with AdamW and a cosine schedule, plus robustness evaluation."""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Callable

import numpy as np

from . import ops
from .checkpoint import Checkpoint, save_checkpoint
from .config import ConfigurationError
from .datasets import Dataset, resize_images, rotate_images
from .model import Conformer, check_input_size, decays, forward, predict
from .tensor import ContractError, NonFiniteError, Tape, check_finite

ROTATIONS = (0, 60, 120, 180, 240, 300)


class TrainingDiverged(RuntimeError):
    """The loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_steps: int = 0
    loss_weights: tuple[float, float] = (1.0, 1.0)
    seed: int = 0
    snapshot_interval: int = 0
    max_steps: int | None = None
    # norm parameters, class token and positional embeddings skip weight decay
    exclude_from_decay: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("lr", "must be > 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size", "must be >= 1")
        if any(w < 0 for w in self.loss_weights):
            raise ConfigurationError("loss_weights", "must be >= 0")
        if self.weight_decay < 0 or self.warmup_steps < 0:
            raise ConfigurationError("weight_decay", "weight decay and warmup must be >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError("max_steps", "must be >= 1")

    def steps_per_epoch(self, n: int) -> int:
        """Full batches per epoch; a trailing partial batch is dropped."""
        if n < self.batch_size:
            raise ConfigurationError("batch_size", f"dataset of {n} items is smaller than one batch")
        return n // self.batch_size

    def total_steps(self, n: int) -> int:
        total = self.epochs * self.steps_per_epoch(n)
        return total if self.max_steps is None else min(total, self.max_steps)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        for k in ("betas", "loss_weights"):
            if k in data:
                data[k] = tuple(data[k])
        return cls(**data)


def dual_loss(cnn_logits, trans_logits, labels, weights=(1.0, 1.0)):
    """Weighted sum of the per-head cross entropies; a missing head contributes nothing."""
    terms = []
    for logits, w in zip((cnn_logits, trans_logits), weights):
        if logits is not None and w != 0:
            terms.append(ops.mul(ops.cross_entropy(logits, labels), float(w)))
    if not terms:
        raise ContractError("dual_loss needs at least one head with a non-zero weight")
    return terms[0] if len(terms) == 1 else ops.add(terms[0], terms[1])


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warmup to ``base_lr``, then half-cosine decay to 0 at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               moments: dict[str, tuple[np.ndarray, np.ndarray]] | None, step: int, lr: float, wd: float,
               betas=(0.9, 0.999), eps: float = 1e-8,
               decay: Callable[[str], bool] | None = None):
    """One AdamW update with decoupled weight decay.

    ``step`` counts from 1. Returns ``(new_params, new_moments)``; inputs are
    not modified. ``decay(name)`` selects which tensors are decayed.
    """
    if step <= 0:
        raise ContractError(f"adamw step must be >= 1, got {step}")
    b1, b2 = betas
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    new_p, new_m = {}, {}
    for name, p in params.items():
        g = grads[name]
        if moments is not None and name in moments:
            m, v = moments[name]
        else:
            m, v = np.zeros_like(p), np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        out = p
        if wd and (decay is None or decay(name)):
            out = out - lr * wd * out
        out = out - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[name] = out.astype(p.dtype, copy=False)
        new_m[name] = (m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False))
    return new_p, new_m


# -- RNG bookkeeping ---------------------------------------------------------------

def rng_state_bytes(bitgen: np.random.PCG64) -> bytes:
    st = bitgen.state["state"]
    return int(st["state"]).to_bytes(16, "little") + int(st["inc"]).to_bytes(16, "little")


def rng_from_bytes(blob: bytes) -> np.random.PCG64:
    if len(blob) != 32:
        raise ValueError("RNG state must be 32 bytes")
    bg = np.random.PCG64()
    bg.state = {"bit_generator": "PCG64",
                "state": {"state": int.from_bytes(blob[:16], "little"), "inc": int.from_bytes(blob[16:], "little")},
                "has_uint32": 0, "uinteger": 0}
    return bg


def epoch_order(bitgen: np.random.PCG64, n: int) -> np.ndarray:
    """Sample order for one epoch.

    Takes exactly one 64-bit word from ``bitgen`` and seeds the permutation with it, so the
    stream never holds a buffered 32-bit half that the 32-byte state blob would drop.
    """
    word = int(bitgen.random_raw())
    return np.random.Generator(np.random.PCG64(word)).permutation(n)


# -- training loop -----------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict] = field(default_factory=list)


def _accuracy(scores: np.ndarray | None, labels: np.ndarray) -> float | None:
    if scores is None:
        return None
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def _locate_non_finite(model: Conformer, images, labels, weights) -> str:
    probe = Conformer(model.config, model.params.copy())
    try:
        with check_finite(), Tape() as tape:
            res = forward(probe, images, "train")
            loss = dual_loss(res.cnn_logits, res.trans_logits, labels, weights)
        tape.backward(loss)
    except NonFiniteError as exc:
        return str(exc)
    bad = [n for n, t in model.params.items() if not np.all(np.isfinite(t.data))]
    return f"non-finite parameters: {', '.join(bad)}" if bad else "no individual op produced a non-finite value"


def _emit(record: dict, streams: list[IO[str]]) -> None:
    line = json.dumps(record, sort_keys=False)
    for s in streams:
        s.write(line + "\n")
        s.flush()


def train(model: Conformer, config: TrainConfig, dataset: Dataset, metrics_path: str | Path | None = None,
          echo: bool = True, resume: Checkpoint | None = None,
          snapshot_dir: str | Path | None = None) -> TrainResult:
    """Train ``model`` in place and return the final checkpoint and the per-step metric records.

    Batch order comes from a PCG64 stream seeded with ``config.seed``: each
    epoch draws one permutation. A checkpoint stores the stream state from the
    start of its epoch, so resuming replays the same order and the remaining
    metric stream matches an uninterrupted run bit for bit.
    """
    check_input_size(model.config, dataset.resolution)
    if dataset.num_classes != model.config.num_classes:
        raise ConfigurationError("num_classes", f"dataset has {dataset.num_classes} classes, model "
                                                f"{model.config.num_classes}")
    n = len(dataset)
    spe = config.steps_per_epoch(n)
    total = config.total_steps(n)
    decay = decays if config.exclude_from_decay else None

    if resume is not None:
        if resume.config != model.config:
            raise ConfigurationError("config", "checkpoint was written for a different model configuration")
        model.params = resume.params.copy()
        moments = {k: (m.copy(), v.copy()) for k, (m, v) in resume.moments.items()}
        step = resume.step
        bitgen = rng_from_bytes(resume.rng_state)
    else:
        moments = {}
        step = 0
        bitgen = np.random.PCG64(config.seed)

    streams: list[IO[str]] = [sys.stdout] if echo else []
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "a" if resume is not None else "w")
        streams.append(fh)

    records: list[dict] = []
    params = model.params
    try:
        while step < total:
            epoch, offset = divmod(step, spe)
            epoch_state = rng_state_bytes(bitgen)
            order = epoch_order(bitgen, n)
            for pos in range(offset, spe):
                if step >= total:
                    break
                idx = order[pos * config.batch_size:(pos + 1) * config.batch_size]
                images, labels = dataset.images[idx], dataset.labels[idx]
                lr = cosine_lr(step, total, config.lr, config.warmup_steps)
                with Tape() as tape:
                    res = forward(model, images, "train")
                    loss = dual_loss(res.cnn_logits, res.trans_logits, labels, config.loss_weights)
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    where = _locate_non_finite(model, images, labels, config.loss_weights)
                    raise TrainingDiverged(f"loss became {loss_value} at step {step + 1}: {where}")
                grads = tape.backward(loss)
                names = params.names()
                new_p, moments = adamw_step({k: params[k].data for k in names},
                                            {k: grads[params[k]] for k in names},
                                            moments, step + 1, lr, config.weight_decay, config.betas, decay=decay)
                for k in names:
                    params[k].data = new_p[k]
                step += 1
                cnn = None if res.cnn_logits is None else res.cnn_logits.data
                trans = None if res.trans_logits is None else res.trans_logits.data
                rec = {"step": step, "epoch": epoch, "lr": lr, "loss": loss_value,
                       "acc_cnn": _accuracy(cnn, labels), "acc_trans": _accuracy(trans, labels),
                       "acc_sum": _accuracy(predict(cnn, trans), labels)}
                records.append(rec)
                _emit(rec, streams)
                if snapshot_dir is not None and config.snapshot_interval and step % config.snapshot_interval == 0:
                    # a snapshot taken at an epoch boundary restarts from the next epoch's stream state
                    rng = epoch_state if step % spe else rng_state_bytes(bitgen)
                    snap = Checkpoint(model.config, step, params.copy(), _copy_moments(moments), rng)
                    save_checkpoint(Path(snapshot_dir) / f"step{step:06d}.cfmr", snap)
    finally:
        if fh is not None:
            fh.close()
    # the run ends on an epoch boundary or mid-epoch; either way record where the next epoch's stream starts
    final_rng = rng_state_bytes(bitgen) if step % spe == 0 else epoch_state
    return TrainResult(Checkpoint(model.config, step, params.copy(), _copy_moments(moments), final_rng), records)


def _copy_moments(moments):
    return {k: (m.copy(), v.copy()) for k, (m, v) in moments.items()}


# -- evaluation ----------------------------------------------------------------------

@dataclass(frozen=True)
class Transform:
    kind: str = "none"
    value: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "Transform":
        """``none``, ``rotate:DEG`` or ``resize:SIZE``."""
        if text == "none":
            return cls()
        kind, _, arg = text.partition(":")
        if kind not in ("rotate", "resize") or not arg:
            raise ValueError(f"unknown transform {text!r}; expected none, rotate:DEG or resize:SIZE")
        return cls(kind, float(arg))

    def __str__(self) -> str:
        return "none" if self.kind == "none" else f"{self.kind}:{self.value:g}"


@dataclass
class EvalResult:
    transform: str
    count: int
    acc_cnn: float | None
    acc_trans: float | None
    acc_sum: float

    def as_dict(self) -> dict:
        return asdict(self)


def apply_transform(images: np.ndarray, transform: Transform) -> np.ndarray:
    if transform.kind == "none":
        return images
    if transform.kind == "rotate":
        return rotate_images(images, transform.value)
    return resize_images(images, int(transform.value))


def evaluate(model: Conformer, dataset: Dataset, transform: Transform | str = "none",
             batch_size: int = 128) -> EvalResult:
    """Per-head and summed-logit accuracy under one test-time transform."""
    if isinstance(transform, str):
        transform = Transform.parse(transform)
    if transform.kind == "resize":
        size = int(transform.value)
        if size != transform.value or size < 1:
            raise ValueError(f"resize size must be a positive integer, got {transform.value}")
        check_input_size(model.config, size)
    else:
        check_input_size(model.config, dataset.resolution)
    hits = {"cnn": 0, "trans": 0, "sum": 0}
    for start in range(0, len(dataset), batch_size):
        images = apply_transform(dataset.images[start:start + batch_size], transform)
        labels = dataset.labels[start:start + batch_size]
        res = forward(model, images, "eval")
        for key, logits in (("cnn", res.cnn_logits), ("trans", res.trans_logits)):
            if logits is not None:
                hits[key] += int(np.sum(np.argmax(logits.data, axis=1) == labels))
        hits["sum"] += int(np.sum(np.argmax(res.predict(), axis=1) == labels))
    n = len(dataset)
    cfg = model.config
    return EvalResult(str(transform), n,
                      hits["cnn"] / n if cfg.has_cnn else None,
                      hits["trans"] / n if cfg.has_transformer else None,
                      hits["sum"] / n)


def model_grad_check(config, mode: str = "eval", batch: int = 2, seed: int = 0, eps: float = 1e-4,
                     tol: float = 1e-4, max_elements: int | None = 6, noise_floor: float | str | None = None):
    """Finite-difference check of the dual loss through a whole model, in f64.

    ``mode`` selects the BatchNorm statistics. In train mode a conv bias
    feeding a BatchNorm has an exactly zero gradient, so a ``noise_floor``
    is needed to keep round-off from counting as relative error.
    """
    from .gradcheck import grad_check
    from .model import build_model
    from .tensor import precision

    with precision("f64"):
        model = Conformer(config, build_model(config, seed).astype(np.float64))
        rng = np.random.default_rng(seed + 1)
        x = rng.standard_normal((batch, 3, config.input_size, config.input_size))
        y = rng.integers(0, config.num_classes, size=batch)

        def loss():
            res = forward(model, x, mode)
            return dual_loss(res.cnn_logits, res.trans_logits, y)

        return grad_check(loss, model.params.tensors, eps=eps, tol=tol, max_elements=max_elements, seed=seed,
                          noise_floor=noise_floor)
