"""Train the micro model on the synthetic shapes set and report train/test accuracy.

    python3 scripts/train_micro.py --out runs/micro
"""

import argparse
import json
import time
from pathlib import Path

from conformer import Conformer, load_config
from conformer.checkpoint import save_checkpoint
from conformer.datasets import synth_split
from conformer.training import TrainConfig, evaluate, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/micro")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quiet", action="store_true")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    train_set, test_set = synth_split(4096, 512, classes=4, size=64, seed=7)
    cfg = load_config("micro")
    tc = TrainConfig(epochs=-(-args.steps // (4096 // 64)), max_steps=args.steps, seed=args.seed)
    model = Conformer.create(cfg, args.seed)
    result = train(model, tc, train_set, metrics_path=out / "metrics.jsonl", echo=not args.quiet)
    save_checkpoint(out / "final.cfmr", result.checkpoint)
    summary = {"steps": result.checkpoint.step, "train_seconds": round(time.time() - t0, 1)}
    for name, ds in (("train", train_set), ("test", test_set)):
        summary[name] = evaluate(model, ds).as_dict()
    summary["total_seconds"] = round(time.time() - t0, 1)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
