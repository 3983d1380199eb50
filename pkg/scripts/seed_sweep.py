"""Held-out accuracy of the toy run across seeds, optionally with config overrides.

    python scripts/seed_sweep.py --seeds 0 1 2 3 --set linguistic_layers=2
"""

import argparse
import tempfile
from pathlib import Path

from dictg2p.pipeline import format_config, load_config, parse_config
from train_toy import ROOT, run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 7])
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "toy.cfg")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--steps", type=int)
    args = ap.parse_args()
    cfg = parse_config(args.set, load_config(args.config))
    with tempfile.NamedTemporaryFile("w", suffix=".cfg", delete=False) as f:
        f.write(format_config(cfg))
    rows = [run(seed, Path(f.name), args.steps) for seed in args.seeds]
    Path(f.name).unlink()
    print("\nseed  final   min-after-half  seconds")
    for r in rows:
        tail = r["trajectory"][len(r["trajectory"]) // 2 :]
        print(f"{r['seed']:4d}  {r['final_accuracy']:.4f}  {min(tail):.4f}          {r['seconds']}")
    print(f"passing (>= 0.95): {sum(r['final_accuracy'] >= 0.95 for r in rows)}/{len(rows)}")


if __name__ == "__main__":
    main()
