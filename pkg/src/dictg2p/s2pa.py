"""Semantics-to-pronunciation attention.

Every function accepts arbitrary leading batch dimensions: a single character
uses ``z`` of shape (d,) and keys (rows, d); the model passes (B, L, d) and
(B, L, rows, d) with masks for padded rows and pronunciation slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import (
    Tensor,
    add,
    as_tensor,
    clamp_min,
    log,
    matmul,
    mul,
    reshape,
    softmax_lastdim,
    straight_through_onehot,
)

LOG_FLOOR = 1e-10


class RuleError(ValueError):
    pass


@dataclass
class AttentionResult:
    raw: Tensor  # (..., rows)
    normalized: Tensor  # (..., rows)
    scale: float


@dataclass
class PronunciationDistribution:
    weights: Tensor  # aggregated w, (..., m)
    noise: np.ndarray | None
    tau: float
    sampled: Tensor  # (..., m)
    mixed: Tensor | None = None  # p', (..., d)
    forced: np.ndarray | None = None


def default_scale(d_model: int) -> float:
    return math.sqrt(d_model)


def attention_scores(z, keys, scale: float, key_mask=None) -> AttentionResult:
    """Dot-product similarity of ``z`` against each key row, divided by
    ``scale``, then normalized jointly over all (pronunciation, token) rows."""
    z, keys = as_tensor(z), as_tensor(keys)
    if keys.shape[-2] == 0:
        raise ValueError("character has no key rows")
    if z.shape[-1] != keys.shape[-1]:
        raise ValueError(f"query width {z.shape[-1]} does not match key width {keys.shape[-1]}")
    raw = mul(reshape(matmul(keys, reshape(z, z.shape + (1,))), keys.shape[:-1]), 1.0 / scale)
    return AttentionResult(raw, softmax_lastdim(raw, key_mask), scale)


def retrieve_semantics(result: AttentionResult, keys) -> Tensor:
    """s' = a' . K, the attention-weighted mean of the key rows."""
    keys = as_tensor(keys)
    a = result.normalized
    return reshape(matmul(reshape(a, a.shape[:-1] + (1, a.shape[-1])), keys), keys.shape[:-2] + (keys.shape[-1],))


def aggregation_matrix(index_map, m: int | None = None) -> np.ndarray:
    """(rows, m) one-hot from a row -> (pron_index, token_index) map."""
    prons = [j for j, _ in index_map]
    m = m if m is not None else max(prons) + 1
    A = np.zeros((len(prons), m))
    A[np.arange(len(prons)), prons] = 1.0
    return A


def aggregate_pron_weights(result: AttentionResult, index_map) -> Tensor:
    """w_j = sum of normalized scores over pronunciation j's gloss rows.

    ``index_map`` is either a list of (pron_index, token_index) pairs, or a
    precomputed aggregation array of shape (..., rows, m).
    """
    a = result.normalized
    if isinstance(index_map, np.ndarray):
        A = index_map
    else:
        A = aggregation_matrix(index_map)
    A = np.asarray(A, dtype=a.dtype)
    if A.shape[-2] != a.shape[-1]:
        raise ValueError(f"index map covers {A.shape[-2]} rows, scores have {a.shape[-1]}")
    w = matmul(reshape(a, a.shape[:-1] + (1, a.shape[-1])), A)
    return reshape(w, a.shape[:-1] + (A.shape[-1],))


def sample_gumbel(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    u = rng.random(shape)
    return (-np.log(-np.log(np.clip(u, 1e-20, 1.0 - 1e-16)))).astype(dtype)


def gumbel_softmax_sample(w, tau: float, noise=None, pron_mask=None, hard: bool = False) -> Tensor:
    """softmax((log(max(w, 1e-10)) + g) / tau) over the last axis.

    ``noise`` is an array of Gumbel draws, a Generator to draw from, or None
    for the noise-free variant.  ``hard`` gives a one-hot forward pass with the
    soft gradient (straight-through).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    w = as_tensor(w)
    logits = log(clamp_min(w, LOG_FLOOR))
    if isinstance(noise, np.random.Generator):
        noise = sample_gumbel(noise, w.shape, w.dtype)
    if noise is not None:
        logits = add(logits, np.asarray(noise, dtype=w.dtype))
    y = softmax_lastdim(mul(logits, 1.0 / tau), pron_mask)
    return straight_through_onehot(y) if hard else y


def _onehot_mask(forced: np.ndarray, m: int, dtype):
    forced = np.asarray(forced)
    onehot = np.zeros(forced.shape + (m,), dtype=dtype)
    hit = forced >= 0
    if np.any(forced[hit] >= m):
        raise RuleError(f"forced pronunciation index out of range for m={m}")
    onehot[hit, forced[hit]] = 1.0
    return onehot, hit[..., None].astype(dtype)


def force_weights(w, forced) -> Tensor:
    """Replace rows with ``forced >= 0`` by the exact one-hot at that index."""
    w = as_tensor(w)
    onehot, hit = _onehot_mask(forced, w.shape[-1], w.dtype)
    if not hit.any():
        return w
    return add(mul(w, 1.0 - hit), onehot * hit)


def mix_pronunciation(sampled, pron_embeddings) -> Tensor:
    """p' = sum_j weight_j * p_j."""
    sampled, pron_embeddings = as_tensor(sampled), as_tensor(pron_embeddings)
    if sampled.shape[-1] != pron_embeddings.shape[-2]:
        raise ValueError(f"{sampled.shape[-1]} weights for {pron_embeddings.shape[-2]} pronunciations")
    out = matmul(reshape(sampled, sampled.shape[:-1] + (1, sampled.shape[-1])), pron_embeddings)
    return reshape(out, pron_embeddings.shape[:-2] + (pron_embeddings.shape[-1],))


def _pinned(shape, pron_mask, forced) -> np.ndarray:
    """Rule-forced index per character, with single-reading characters pinned
    to 0 so their weight is exactly 1 rather than a rounded softmax sum."""
    if pron_mask is None:
        m_valid = np.full(shape[:-1], shape[-1])
    else:
        m_valid = np.broadcast_to(np.asarray(pron_mask), shape).sum(axis=-1)
    out = np.where(m_valid == 1, 0, -1)
    if forced is not None:
        forced = np.asarray(forced)
        out = np.where(forced >= 0, forced, out)
    return out


@dataclass
class S2PAOutput:
    attention: AttentionResult
    semantics: Tensor  # s'
    distribution: PronunciationDistribution


def s2pa_forward(
    z,
    keys,
    key_mask,
    aggregation,
    pron_embeddings,
    pron_mask,
    tau: float,
    scale: float,
    noise=None,
    forced=None,
    hard: bool = False,
) -> S2PAOutput:
    """Scores -> s' -> w -> (rule forcing) -> Gumbel-Softmax -> p'.

    Forced rows and single-reading characters bypass sampling and carry the
    exact one-hot weights.
    """
    att = attention_scores(z, keys, scale, key_mask)
    s = retrieve_semantics(att, keys)
    w = aggregate_pron_weights(att, aggregation)
    pinned = _pinned(w.shape, pron_mask, forced)
    w_used = force_weights(w, pinned)
    sampled = gumbel_softmax_sample(w_used, tau, noise, pron_mask, hard)
    sampled = force_weights(sampled, pinned)
    dist = PronunciationDistribution(w_used, noise if isinstance(noise, np.ndarray) else None, tau, sampled, None, forced)
    dist.mixed = mix_pronunciation(sampled, pron_embeddings)
    return S2PAOutput(att, s, dist)


# ---------------------------------------------------------------------------
# expert rules


PREDICATES = ("prev_in", "next_in", "position", "next_tone")


@dataclass(frozen=True)
class Rule:
    char: str
    predicate: str
    argument: str
    pron_index: int

    def __post_init__(self):
        if self.predicate not in PREDICATES:
            raise RuleError(f"unknown predicate {self.predicate!r}; expected one of {PREDICATES}")
        if self.predicate == "position" and self.argument not in ("first", "last"):
            raise RuleError("position predicate takes 'first' or 'last'")
        if self.pron_index < 0:
            raise RuleError("pron_index must be non-negative")


@dataclass(frozen=True)
class OccurrenceContext:
    sentence: str
    position: int
    dictionary: object = None


def _tone(pron) -> str | None:
    last = pron.phonemes[-1]
    return last[-1] if last and last[-1].isdigit() else None


def rule_matches(rule: Rule, ctx: OccurrenceContext) -> bool:
    s, i = ctx.sentence, ctx.position
    if s[i] != rule.char:
        return False
    if rule.predicate == "prev_in":
        return i > 0 and s[i - 1] in rule.argument
    if rule.predicate == "next_in":
        return i + 1 < len(s) and s[i + 1] in rule.argument
    if rule.predicate == "position":
        return i == 0 if rule.argument == "first" else i == len(s) - 1
    # next_tone: every reading of the following character carries that tone
    if i + 1 >= len(s) or ctx.dictionary is None or s[i + 1] not in ctx.dictionary:
        return False
    rec = ctx.dictionary.lookup(s[i + 1])
    return all(_tone(p) == rule.argument for p in rec.prons)


@dataclass(frozen=True)
class RuleSet:
    rules: tuple = ()

    def __len__(self):
        return len(self.rules)

    def match(self, ctx: OccurrenceContext) -> int | None:
        """Forced pronunciation index of the first matching rule, if any."""
        for rule in self.rules:
            if rule_matches(rule, ctx):
                return rule.pron_index
        return None

    def forced_indices(self, sentence: str, dictionary=None) -> np.ndarray:
        """Per position: forced index, or -1."""
        out = np.full(len(sentence), -1, dtype=np.int64)
        for i in range(len(sentence)):
            hit = self.match(OccurrenceContext(sentence, i, dictionary))
            if hit is not None:
                out[i] = hit
        return out

    @classmethod
    def parse(cls, lines):
        """Tab-separated ``char predicate argument pron_index``; '#' starts a comment."""
        rules = []
        for lineno, line in enumerate(lines, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise RuleError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
            try:
                rules.append(Rule(parts[0], parts[1], parts[2], int(parts[3])))
            except ValueError as exc:
                raise RuleError(f"line {lineno}: {exc}") from None
        return cls(tuple(rules))

    def format(self) -> str:
        return "".join(f"{r.char}\t{r.predicate}\t{r.argument}\t{r.pron_index}\n" for r in self.rules)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.parse(f)

    def save(self, path):
        Path(path).write_text(self.format(), encoding="utf-8")


def apply_rules(w, ctx: OccurrenceContext, rules: RuleSet) -> np.ndarray:
    """w unchanged, or exactly one-hot if a rule fires for this occurrence."""
    w = np.asarray(w.data if isinstance(w, Tensor) else w)
    hit = rules.match(ctx)
    if hit is None:
        return w
    if hit >= w.shape[-1]:
        raise RuleError(f"rule forces index {hit} but {ctx.sentence[ctx.position]!r} has {w.shape[-1]} pronunciations")
    out = np.zeros_like(w)
    out[hit] = 1.0
    return out
