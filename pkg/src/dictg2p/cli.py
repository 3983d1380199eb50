"""Command-line entry point: ``dictg2p <subcommand> ...``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dictionary import DictionaryError, dictionary_stats, load_dictionary, save_dictionary
from .encoders import build_key_store, read_key_file
from .evaluation import evaluate, export_attention
from .pipeline import (
    ConfigError,
    DictG2PModel,
    ModelConfig,
    inference_result,
    load_checkpoint,
    load_config,
    model_from_checkpoint,
    save_checkpoint,
    train_on_corpus,
)
from .s2pa import RuleSet
from .synthcorpus import generate_corpus, generate_spec, read_corpus_dir, write_corpus_dir

log = logging.getLogger("dictg2p")


class CLIError(Exception):
    pass


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="key=value model config")
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=("f32", "f64"))
    p.add_argument("--deterministic", action="store_true", help="single BLAS thread")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _model_source(p: argparse.ArgumentParser, need_checkpoint: bool = True):
    p.add_argument("--corpus", type=Path, help="corpus directory (supplies dict.txt and keys.bin)")
    p.add_argument("--dict", dest="dict_path", type=Path)
    p.add_argument("--keys", type=Path)
    if need_checkpoint:
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--rules", type=Path, help="TSV rule file")


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="dictg2p", description="Dictionary-grounded polyphone disambiguation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dict", parents=[common], help="parse a dictionary into a binary snapshot")
    p.add_argument("--in", dest="src", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--max-gloss", type=int, default=64)

    p = sub.add_parser("gen-corpus", parents=[common], help="generate a synthetic toy language")
    p.add_argument("--chars", type=int, default=60)
    p.add_argument("--polyphones", type=int, default=12)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", parents=[common], help="train from sentences and acoustic targets")
    _model_source(p, need_checkpoint=False)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", type=Path)
    p.add_argument("--metrics", type=Path, help="JSON-lines training log")
    p.add_argument("--rules", type=Path)

    p = sub.add_parser("g2p", parents=[common], help="pronunciations for a sentence or a file of sentences")
    _model_source(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text")
    src.add_argument("--file", type=Path)
    p.add_argument("--sample-gumbel", action="store_true", help="sample readings instead of argmax")

    p = sub.add_parser("eval", parents=[common], help="PER, SER and polyphone accuracy on a labelled corpus")
    _model_source(p)
    p.add_argument("--split", default="heldout")
    p.add_argument("--out", type=Path, help="write the report as JSON")

    p = sub.add_parser("export-attn", parents=[common], help="dump w and attention per character")
    _model_source(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text")
    src.add_argument("--file", type=Path)
    p.add_argument("--out", type=Path, required=True)
    return parser


# ---------------------------------------------------------------------------


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise CLIError(f"missing {what}")
    if not path.exists():
        raise CLIError(f"{what} not found: {path}")
    return path


def _resources(args):
    dict_path = args.dict_path or (args.corpus / "dict.txt" if args.corpus else None)
    keys_path = args.keys or (args.corpus / "keys.bin" if args.corpus else None)
    d = load_dictionary(_require(dict_path, "dictionary (--dict or --corpus)"))
    keys = read_key_file(_require(keys_path, "key file (--keys or --corpus)")) if keys_path is not None else None
    return d, keys


def _config(args) -> ModelConfig:
    cfg = load_config(_require(args.config, "config")) if args.config else ModelConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.dtype is not None:
        changes["dtype"] = args.dtype
    return cfg.replace(**changes) if changes else cfg


def _load_model(args) -> DictG2PModel:
    d, keys = _resources(args)
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    cfg = ckpt.config if args.dtype is None else ckpt.config.replace(dtype=args.dtype)
    ckpt.config = cfg
    store = build_key_store(d, cfg.key_mode, keys, d_model=cfg.d_model)
    return model_from_checkpoint(ckpt, d, store)


def _rules(args) -> RuleSet | None:
    return RuleSet.load(_require(args.rules, "rule file")) if getattr(args, "rules", None) else None


def _sentences(args) -> list[str]:
    if args.text is not None:
        return [args.text]
    lines = _require(args.file, "input file").read_text(encoding="utf-8").splitlines()
    return [s for s in (line.strip() for line in lines) if s]


def cmd_build_dict(args) -> int:
    errors = []
    src = _require(args.src, "input dictionary")
    from .dictionary import parse_dictionary

    with open(src, encoding="utf-8") as f:
        d = parse_dictionary(f, args.max_gloss, errors=errors)
    for e in errors:
        print(f"{src}:{e}", file=sys.stderr)
    save_dictionary(d, args.out)
    s = dictionary_stats(d)
    print(json.dumps({"chars": s.n, "polyphones": s.polyphones, "max_m": s.max_m, "max_u": s.max_u, "phonemes": s.phonemes, "errors": len(errors)}))
    return 1 if errors else 0


def cmd_gen_corpus(args) -> int:
    if args.seed is None:
        raise CLIError("gen-corpus needs an explicit --seed")
    spec = generate_spec(args.chars, args.polyphones, args.classes, seed=args.seed, d_model=args.d_model)
    corpus = generate_corpus(spec, args.n, seed=args.seed)
    write_corpus_dir(args.out, spec, corpus)
    print(json.dumps({"out": str(args.out), "sentences": len(corpus), "heldout": corpus.splits.count("heldout")}))
    return 0


def cmd_train(args) -> int:
    if args.seed is None:
        raise CLIError("train needs an explicit --seed")
    if args.corpus is None:
        raise CLIError("train needs --corpus")
    cfg = _config(args)
    # labels are never read on the training path
    _, corpus, _, _ = read_corpus_dir(_require(args.corpus, "corpus"), with_labels=False)
    d, keys = _resources(args)
    store = build_key_store(d, cfg.key_mode, keys, d_model=cfg.d_model)
    resume = load_checkpoint(_require(args.resume, "checkpoint")) if args.resume else None
    if resume is not None:
        cfg = resume.config
    model = DictG2PModel(d, store, cfg)
    ckpt = train_on_corpus(model, corpus, steps=args.steps, resume=resume, metrics_path=args.metrics, rules=_rules(args))
    save_checkpoint(ckpt, args.out)
    last = ckpt.history[-1] if ckpt.history else {}
    print(json.dumps({"checkpoint": str(args.out), "step": ckpt.step, "loss": last.get("loss"), "config_hash": cfg.hash()}))
    return 0


def _predict(model, sentences, args):
    rng = np.random.default_rng([args.seed or 0, 4]) if getattr(args, "sample_gumbel", False) else None
    return model.predict(sentences, _rules(args), rng)


def cmd_g2p(args) -> int:
    model = _load_model(args)
    sentences = _sentences(args)
    preds, _ = _predict(model, sentences, args)
    for s, idx in zip(sentences, preds):
        prons = model.pronunciations(s, idx)
        print(s + "\t" + " | ".join(str(p) for p in prons))
    return 0


def cmd_eval(args) -> int:
    if args.corpus is None:
        raise CLIError("eval needs --corpus with labels")
    model = _load_model(args)
    _, corpus, _, _ = read_corpus_dir(args.corpus, with_labels=True)
    part = corpus.subset(args.split)
    if not part.sentences:
        raise CLIError(f"split {args.split!r} is empty")
    if any(len(lab) != len(s) for s, lab in zip(part.sentences, part.labels)):
        raise CLIError("corpus has no labels for every sentence of the split")
    preds, _ = _predict(model, part.sentences, args)
    report = evaluate(model.dictionary, part.sentences, preds, part.labels).to_json()
    text = json.dumps(report, ensure_ascii=False)
    if args.out:
        args.out.write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_export_attn(args) -> int:
    model = _load_model(args)
    sentences = _sentences(args)
    preds, diags = _predict(model, sentences, args)
    results = []
    for n, (s, idx) in enumerate(zip(sentences, preds)):
        diag = diags[n // 64]
        results.append(inference_result(model, s, idx, diag, n % 64))
    count = export_attention(results, args.out)
    print(json.dumps({"out": str(args.out), "records": count}))
    return 0


COMMANDS = {
    "build-dict": cmd_build_dict,
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "g2p": cmd_g2p,
    "eval": cmd_eval,
    "export-attn": cmd_export_attn,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    limit = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(1)
    try:
        with limit:
            return COMMANDS[args.command](args)
    except (CLIError, ConfigError, DictionaryError, OSError, KeyError, ValueError) as exc:
        print(f"dictg2p {args.command}: error: {exc}", file=sys.stderr)
        return 2


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()

