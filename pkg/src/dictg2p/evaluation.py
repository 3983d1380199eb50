"""Error rates, polyphone confusion and attention export."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit costs, two-row DP."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def per(predicted, reference) -> float:
    """Phoneme error rate: summed edit distance over summed reference length.

    Both arguments are sequences of phoneme sequences, one per sentence.
    """
    if len(predicted) != len(reference):
        raise ValueError(f"{len(predicted)} predictions for {len(reference)} references")
    total = sum(len(r) for r in reference)
    if total == 0:
        raise ValueError("phoneme error rate is undefined for an empty reference")
    return sum(edit_distance(list(p), list(r)) for p, r in zip(predicted, reference)) / total


def ser(predicted, reference) -> float:
    """Sentence error rate: share of sentences with any difference."""
    if len(predicted) != len(reference):
        raise ValueError(f"{len(predicted)} predictions for {len(reference)} references")
    if not reference:
        raise ValueError("sentence error rate is undefined for an empty reference")
    return sum(list(p) != list(r) for p, r in zip(predicted, reference)) / len(reference)


def phoneme_sequence(prons) -> list:
    """Flatten a sentence's pronunciations into one phoneme list."""
    return [ph for p in prons for ph in p.phonemes]


@dataclass
class EvalReport:
    per: float
    ser: float
    polyphone_accuracy: float
    n_sentences: int
    n_polyphones: int
    confusion: dict = field(default_factory=dict)  # char -> {(true, predicted): count}
    kind: str = "objective"

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "per": self.per,
            "ser": self.ser,
            "polyphone_accuracy": self.polyphone_accuracy,
            "n_sentences": self.n_sentences,
            "n_polyphones": self.n_polyphones,
            "confusion": {ch: {f"{t}->{p}": n for (t, p), n in sorted(c.items())} for ch, c in self.confusion.items()},
        }


def evaluate(dictionary, sentences, predicted, truth) -> EvalReport:
    """Compare per-character reading indices against the true ones."""
    ref_seqs, pred_seqs = [], []
    confusion: dict[str, Counter] = {}
    hits = total = 0
    for sent, p_idx, t_idx in zip(sentences, predicted, truth):
        recs = [dictionary.resolve(ch) for ch in sent]
        ref_seqs.append(phoneme_sequence([r.prons[int(j)] for r, j in zip(recs, t_idx)]))
        pred_seqs.append(phoneme_sequence([r.prons[int(j)] for r, j in zip(recs, p_idx)]))
        for ch, r, pj, tj in zip(sent, recs, p_idx, t_idx):
            if r.m > 1:
                confusion.setdefault(ch, Counter())[(int(tj), int(pj))] += 1
                hits += int(pj) == int(tj)
                total += 1
    return EvalReport(
        per=per(pred_seqs, ref_seqs),
        ser=ser(pred_seqs, ref_seqs),
        polyphone_accuracy=hits / total if total else float("nan"),
        n_sentences=len(sentences),
        n_polyphones=total,
        confusion={ch: dict(c) for ch, c in confusion.items()},
    )


# ---------------------------------------------------------------------------
# attention export


def attention_records(result) -> list[dict]:
    """One JSON-ready record per character of an inference result."""
    out = []
    for i, ch in enumerate(result.sentence):
        out.append(
            {
                "sentence": result.sentence,
                "position": i,
                "char": ch,
                "pron": str(result.pronunciations[i]),
                "index": int(result.indices[i]),
                "forced": bool(result.forced[i]),
                "w": [float(x) for x in result.weights[i]],
                "attention": [float(x) for x in result.attention[i]],
                "legend": [[int(j), int(k)] for j, k in result.index_maps[i]],
            }
        )
    return out


def export_attention(results, path) -> int:
    """Write JSON lines, one per character; returns the record count."""
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for res in results:
            for rec in attention_records(res):
                f.write(json.dumps(rec, ensure_ascii=False) + "\n")
                n += 1
    return n


def load_attention(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def attention_matrix(record: dict) -> np.ndarray:
    """The flat a' of one record laid out as (pronunciation, gloss token), NaN-padded."""
    legend = record["legend"]
    m = max(j for j, _ in legend) + 1
    u = max(k for _, k in legend) + 1
    out = np.full((m, u), np.nan)
    for (j, k), a in zip(legend, record["attention"]):
        out[j, k] = a
    return out


def write_metrics(records, path) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
