"""Command-line entry point: ``conformer {train,eval,audit,inspect,bench,gradcheck}``.

Exit codes: 0 success, 1 bad arguments, 2 runtime error, 3 failed audit or
gradient comparison. ``CONFORMER_THREADS`` caps BLAS threads and
``CONFORMER_SEED`` overrides every seed argument.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import audit as audit_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigurationError, degenerate, load_config
from .datasets import Dataset, DatasetError, load_image_folder, normalize, synth_split
from .model import Conformer, forward
from .tensor import ContractError
from .training import ROTATIONS, TrainConfig, Transform, TrainingDiverged, evaluate, model_grad_check, train
from .viz import attention_rollout, bench, cam, export_feature_maps, write_heatmap, write_tnsr

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_FAILED = 0, 1, 2, 3
RUNTIME_ERRORS = (ConfigurationError, DatasetError, CheckpointError, ContractError, TrainingDiverged,
                  FileNotFoundError, OSError, ValueError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def seed_arg(value: int) -> int:
    env = os.environ.get("CONFORMER_SEED")
    return int(env) if env not in (None, "") else value


# -- shared helpers -----------------------------------------------------------------

def resolve_model(args) -> Conformer:
    if getattr(args, "checkpoint", None):
        ckpt = load_checkpoint(args.checkpoint)
        return Conformer(ckpt.config, ckpt.params)
    if not getattr(args, "config", None):
        raise UsageError("give --checkpoint or --config")
    cfg = load_config(args.config)
    if getattr(args, "branch", None):
        cfg = degenerate(cfg, args.branch)
    return Conformer.create(cfg, seed_arg(args.seed))


def resolve_data(spec: str, split: str, num_classes: int, size: int, args) -> Dataset:
    if spec == "synth":
        tr, te = synth_split(args.synth_train, args.synth_test, classes=num_classes, size=size,
                             seed=args.synth_seed)
        return tr if split == "train" else te
    return load_image_folder(spec, split)


def add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default="synth", help="image folder (one subdirectory per class) or 'synth'")
    p.add_argument("--synth-train", type=int, default=4096, help="synthetic training images")
    p.add_argument("--synth-test", type=int, default=512, help="synthetic test images")
    p.add_argument("--synth-seed", type=int, default=7, help="synthetic dataset seed")


def load_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.shape[0] != arr.shape[1]:
        raise DatasetError(f"{path} is not square")
    return normalize(arr.transpose(2, 0, 1))


# -- subcommands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = seed_arg(args.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        cfg = resume.config
    dataset = resolve_data(args.data, "train", cfg.num_classes, cfg.input_size, args)
    epochs = args.epochs
    if epochs is None:
        epochs = 1 if args.steps is None else -(-args.steps // max(len(dataset) // args.batch_size, 1))
    tc = TrainConfig(epochs=epochs, batch_size=args.batch_size, lr=args.lr, weight_decay=args.wd,
                     warmup_steps=args.warmup, seed=seed, snapshot_interval=args.snapshot_interval,
                     max_steps=args.steps, loss_weights=(args.cnn_weight, args.trans_weight))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = Conformer.create(cfg, seed)
    result = train(model, tc, dataset, metrics_path=out / "metrics.jsonl", echo=not args.quiet, resume=resume,
                   snapshot_dir=out / "snapshots" if args.snapshot_interval else None)
    save_checkpoint(out / "final.cfmr", result.checkpoint)
    print(f"saved {out / 'final.cfmr'} at step {result.checkpoint.step}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = resolve_model(args)
    cfg = model.config
    dataset = resolve_data(args.data, args.split, cfg.num_classes, cfg.input_size, args)
    transforms = []
    for t in args.transform or ["none"]:
        transforms += [f"rotate:{r}" for r in ROTATIONS] if t == "rotations" else [t]
    results = [evaluate(model, dataset, Transform.parse(t)) for t in transforms]
    if args.json:
        print(json.dumps([r.as_dict() for r in results], indent=2))
    else:
        print(f"{'transform':<14}{'cnn':>8}{'trans':>8}{'sum':>8}   (n={len(dataset)})")
        for r in results:
            cells = [f"{v:8.4f}" if v is not None else f"{'-':>8}" for v in (r.acc_cnn, r.acc_trans, r.acc_sum)]
            print(f"{r.transform:<14}{''.join(cells)}")
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = load_config(args.config)
    if args.branch:
        cfg = degenerate(cfg, args.branch)
    report = audit_mod.audit(cfg, args.input_size)
    rows = None
    if args.compare:
        rows = audit_mod.audit_compare(args.compare, config=cfg)
    if args.json:
        doc = report.summary()
        if rows is not None:
            doc["compare"] = [dict(row=r.row, quantity=r.quantity, reference=r.reference, computed=r.computed,
                                   rel_error=r.rel_error, tolerance=r.tolerance, required=r.required,
                                   passed=r.passed) for r in rows]
        print(json.dumps(doc, indent=2))
    else:
        print(report.format())
        if rows is not None:
            print()
            print(audit_mod.format_compare(rows) if rows else f"no reference rows for config {cfg.name!r}")
    if rows is not None and any(r.required and not r.passed for r in rows):
        return EXIT_FAILED
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = resolve_model(args)
    cfg = model.config
    if args.image:
        image = load_png(args.image)
    else:
        ds = resolve_data("synth", "test", cfg.num_classes, cfg.input_size, args)
        if not 0 <= args.index < len(ds):
            raise UsageError(f"--index must be in [0, {len(ds)})")
        image = ds.images[args.index]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = forward(model, image[None], "eval", taps=True)
    scores = result.predict()[0]
    pred = int(np.argmax(scores))
    written = []
    backdrop = image if args.overlay else None
    if args.cam is not None:
        cls = pred if args.cam == "pred" else int(args.cam)
        hm = cam(model, image, cls, result)
        write_heatmap(out / "cam.png", hm, backdrop, args.cmap)
        written.append("cam.png")
        if args.raw:
            write_tnsr(out / "cam.tnsr", hm.raw)
    if args.rollout:
        hm = attention_rollout(model, image, result)
        write_heatmap(out / "rollout.png", hm, backdrop, args.cmap)
        written.append("rollout.png")
        if args.raw:
            write_tnsr(out / "rollout.tnsr", hm.raw)
    if args.features:
        maps = export_feature_maps(model, image, args.features, None)
        for name, hm in maps.items():
            write_heatmap(out / f"{name}.png", hm, backdrop, args.cmap)
            written.append(f"{name}.png")
            if args.raw:
                write_tnsr(out / f"{name}.tnsr", result.taps[name].data[0])
    print(json.dumps({"predicted": pred, "scores": [float(s) for s in scores], "written": written}))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    res = bench(cfg, args.batch, args.iters, args.warmup, seed=seed_arg(args.seed))
    print(json.dumps({"config": res.config, "batch": res.batch, "images_per_second": res.images_per_second,
                      "per_iteration": res.per_iteration, "hardware": res.hardware}, indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    if args.sampling:
        cfg = cfg.replace(sampling=args.sampling)
    report = model_grad_check(cfg, mode=args.mode, batch=args.batch, seed=seed_arg(args.seed), eps=args.eps,
                              tol=args.tol, max_elements=args.max_elements or None, noise_floor=args.noise_floor)
    print(report.format(limit=args.limit))
    return EXIT_OK if report.passed else EXIT_FAILED


# -- parser --------------------------------------------------------------------------

def build_parser() -> Parser:
    ap = Parser(prog="conformer", description="Dual-branch CNN/transformer classifier toolkit")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("train", help="train on an image folder or the synthetic shapes set")
    p.add_argument("--config", required=True)
    add_data_args(p)
    p.add_argument("--out", required=True, help="output directory for metrics.jsonl and final.cfmr")
    p.add_argument("--epochs", type=int, default=None, help="default: 1, or enough to cover --steps")
    p.add_argument("--steps", type=int, default=None, help="stop after this many steps")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--wd", type=float, default=0.05)
    p.add_argument("--warmup", type=int, default=0)
    p.add_argument("--cnn-weight", type=float, default=1.0)
    p.add_argument("--trans-weight", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snapshot-interval", type=int, default=0)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true", help="do not echo metrics to stdout")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy per head under test-time transforms")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--branch", choices=("cnn_only", "transformer_only"))
    add_data_args(p)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--transform", action="append",
                   help="none, rotate:DEG, resize:SIZE or 'rotations' (all six angles); repeatable")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="parameter and MAC breakdown")
    p.add_argument("--config", required=True)
    p.add_argument("--input-size", type=int, default=None)
    p.add_argument("--branch", choices=("cnn_only", "transformer_only"))
    p.add_argument("--compare", help="reference table: 'reference' (the shipped budgets) or a JSON file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("inspect", help="CAM, attention rollout and feature-map heatmaps for one image")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--branch", choices=("cnn_only", "transformer_only"))
    p.add_argument("--image", help="PNG input; default is a synthetic test image")
    p.add_argument("--index", type=int, default=0, help="synthetic test image index")
    add_data_args(p)
    p.add_argument("--cam", nargs="?", const="pred", help="class index or 'pred'")
    p.add_argument("--rollout", action="store_true")
    p.add_argument("--features", help="comma-separated tap names or patterns, e.g. 'c5,trans.final'")
    p.add_argument("--overlay", action="store_true", help="blend heatmaps over the input at 40%% opacity")
    p.add_argument("--cmap", choices=("viridis", "gray"), default="viridis")
    p.add_argument("--raw", action="store_true", help="also write TNSR tensor dumps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", help="forward throughput in images per second")
    p.add_argument("--config", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of the dual loss in f64")
    p.add_argument("--config", required=True)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--mode", choices=("eval", "train"), default="eval", help="BatchNorm statistics to use")
    p.add_argument("--sampling", choices=("avgpool", "maxpool", "conv", "attention"))
    p.add_argument("--max-elements", type=int, default=6, help="entries checked per tensor (0 = all)")
    p.add_argument("--noise-floor", type=float, default=None)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None, help="rows shown in the report")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def thread_limit():
    n = os.environ.get("CONFORMER_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        with thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"conformer {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"conformer {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
