"""Train on the 60/12/4 toy language and report held-out polyphone accuracy.

    python scripts/train_toy.py --seed 0 --out runs/toy
"""

import argparse
import json
import time
from pathlib import Path

from dictg2p.encoders import build_key_store
from dictg2p.pipeline import DictG2PModel, EvalSet, load_config, save_checkpoint, train_on_corpus
from dictg2p.synthcorpus import emit_oracle_dictionary, generate_corpus, generate_spec

ROOT = Path(__file__).resolve().parents[1]


def run(seed: int, config: Path, steps: int | None = None, eval_every: int = 250, out: Path | None = None) -> dict:
    cfg = load_config(config).replace(seed=seed, eval_every=eval_every, log_every=eval_every)
    spec = generate_spec(60, 12, 4, seed=seed, d_model=cfg.d_model, n_features=cfg.n_features)
    corpus = generate_corpus(spec, 5000, seed=seed)
    held = corpus.subset("heldout")
    d, keys = emit_oracle_dictionary(spec)
    model = DictG2PModel(d, build_key_store(d, "imported", keys), cfg)
    start = time.perf_counter()
    ckpt = train_on_corpus(
        model,
        corpus,
        steps=steps,
        evalset=EvalSet(held.sentences, held.labels, held.polyphone_masks),
        metrics_path=out / "metrics.jsonl" if out else None,
        callback=lambda r: print(f"step {r['step']:5d}  loss {r['loss']:.5f}  tau {r['tau']:.3f}  acc {r.get('eval_accuracy', float('nan')):.4f}", flush=True),
    )
    summary = {
        "seed": seed,
        "steps": ckpt.step,
        "seconds": round(time.perf_counter() - start, 1),
        "final_accuracy": ckpt.history[-1]["eval_accuracy"],
        "trajectory": [r["eval_accuracy"] for r in ckpt.history],
    }
    if out:
        save_checkpoint(ckpt, out / "model.ckpt")
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "toy.cfg")
    ap.add_argument("--steps", type=int)
    ap.add_argument("--eval-every", type=int, default=250)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
    s = run(args.seed, args.config, args.steps, args.eval_every, args.out)
    print(f"seed {s['seed']}: held-out accuracy {s['final_accuracy']:.4f} after {s['steps']} steps ({s['seconds']}s)")


if __name__ == "__main__":
    main()
