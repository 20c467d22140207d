"""Run the acceptance pipeline twice with the same seeds and compare every output byte for byte.

    python3 scripts/double_run.py --out runs/double [--steps 2000]

Each pass writes the audit tables, the micro training metrics and checkpoint,
an evaluation table and CAM / rollout / feature-map PNGs for a few test images.
Exit status 0 when both passes are identical.
"""

import argparse
import contextlib
import hashlib
import io
import sys
from pathlib import Path

from conformer.cli import main as cli


def run(cmd: list[str], out: Path | None = None) -> None:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli(cmd)
    if code != 0:
        raise SystemExit(f"{' '.join(cmd)} exited {code}")
    if out is not None:
        out.write_text(buf.getvalue())


def one_pass(root: Path, steps: int) -> dict[str, str]:
    root.mkdir(parents=True, exist_ok=True)
    for name in ("conformer_ti", "conformer_s", "conformer_b", "micro"):
        run(["audit", "--config", name, "--json"], root / f"audit_{name}.json")
    run(["audit", "--config", "conformer_s", "--compare", "reference"], root / "audit_compare.txt")
    run(["train", "--config", "micro", "--out", str(root / "train"), "--steps", str(steps), "--quiet",
         "--snapshot-interval", str(max(steps // 4, 1))])
    ckpt = str(root / "train" / "final.cfmr")
    run(["eval", "--checkpoint", ckpt, "--transform", "none", "--transform", "rotations", "--json"],
        root / "eval.json")
    for i in range(4):
        run(["inspect", "--checkpoint", ckpt, "--index", str(i), "--cam", "--rollout", "--features", "c5,trans.final",
             "--overlay", "--raw", "--out", str(root / f"inspect{i}")], root / f"inspect{i}.json")
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/double")
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args()
    out = Path(args.out)
    a, b = one_pass(out / "a", args.steps), one_pass(out / "b", args.steps)
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    print(f"{len(a)} files per pass, {len(differ)} differ")
    for k in differ:
        print(f"  differs: {k}")
    return 1 if differ or not a else 0


if __name__ == "__main__":
    sys.exit(main())
