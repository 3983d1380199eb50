"""Semantic and linguistic encoders, vocabularies, pronunciation embeddings
and the gloss key store.

Both encoders are stacks of post-norm feed-forward Transformer blocks: relative
position self-attention followed by a width-``conv_kernel`` convolutional FFN.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .dictionary import UNK_CHAR, UNK_PHONEME, UNK_RECORD, CharacterRecord, Dictionary, Pronunciation
from .numerics import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    embedding_lookup,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    softmax_lastdim,
    transpose,
    unfold1d,
)

PAD = "<pad>"
KEY_MAGIC = b"DKEY"
KEY_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    semantic_layers: int = 2
    linguistic_layers: int = 2
    heads: int = 2
    conv_kernel: int = 5
    ffn_mult: int = 4
    rel_clip: int = 8

    def __post_init__(self):
        for name in ("d_model", "semantic_layers", "linguistic_layers", "heads", "conv_kernel", "ffn_mult", "rel_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")

    @classmethod
    def full_scale(cls):
        return cls(d_model=192, semantic_layers=4, linguistic_layers=4)


# ---------------------------------------------------------------------------
# vocabularies


@dataclass
class Vocab:
    """Symbol <-> dense id.  Id 0 is padding, id 1 is the unknown symbol."""

    symbols: list
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols)

    def id(self, sym) -> int:
        return self.index.get(sym, 1)

    def encode(self, seq) -> np.ndarray:
        return np.array([self.id(s) for s in seq], dtype=np.int64)


def char_vocab(d: Dictionary) -> Vocab:
    """Dictionary characters first, then gloss-only tokens in first-seen order."""
    seen = dict.fromkeys([PAD, UNK_CHAR])
    seen.update(dict.fromkeys(d.chars))
    for rec in d:
        for g in rec.glosses:
            seen.update(dict.fromkeys(g.tokens))
    return Vocab(list(seen))


def phoneme_vocab(d: Dictionary) -> Vocab:
    return Vocab([PAD, UNK_PHONEME] + sorted(d.phoneme_inventory - {UNK_PHONEME}))


@dataclass
class PronunciationTable:
    """Every distinct phoneme sequence in the dictionary, with the matrix that
    averages phoneme embeddings into pronunciation embeddings."""

    prons: list
    index: dict
    averaging: np.ndarray  # (n_prons, n_phonemes)

    @classmethod
    def build(cls, d: Dictionary, phonemes: Vocab):
        prons = [UNK_RECORD.prons[0].phonemes]
        for rec in d:
            prons.extend(p.phonemes for p in rec.prons)
        prons = list(dict.fromkeys(prons))
        avg = np.zeros((len(prons), len(phonemes)))
        for i, seq in enumerate(prons):
            for ph in seq:
                if ph not in phonemes.index:
                    raise KeyError(f"unknown phoneme {ph!r}")
                avg[i, phonemes.index[ph]] += 1.0 / len(seq)
        return cls(prons, {p: i for i, p in enumerate(prons)}, avg)

    def id(self, pron: Pronunciation) -> int:
        return self.index[pron.phonemes]


def pronunciation_embedding(pron: Pronunciation, table: Tensor, phonemes: Vocab) -> Tensor:
    """Mean of the pronunciation's phoneme embeddings."""
    missing = [ph for ph in pron.phonemes if ph not in phonemes.index]
    if missing:
        raise KeyError(f"unknown phoneme id for {missing}")
    ids = np.array([phonemes.index[ph] for ph in pron.phonemes])
    rows = embedding_lookup(table, ids)
    weights = np.full((1, len(ids)), 1.0 / len(ids), dtype=table.dtype)
    return reshape(matmul(weights, rows), (table.shape[1],))


# ---------------------------------------------------------------------------
# key store


@dataclass
class KeyStore:
    """Gloss-token key rows, flattened per character.

    Row order within a character is (pron 0, token 0..u0-1), (pron 1, ...), ...
    In ``trainable`` mode rows are looked up from a key-embedding table by
    ``token_ids``; in ``imported`` mode ``vectors`` holds frozen rows.
    """

    mode: str
    d_model: int
    chars: list
    offsets: dict  # char -> (start, count)
    index_maps: dict  # char -> list of (pron_index, token_index)
    token_ids: np.ndarray  # (total_rows,)
    vectors: np.ndarray | None = None  # (total_rows, d_model), float32

    def __post_init__(self):
        if self.mode not in ("trainable", "imported"):
            raise ValueError(f"unknown key-store mode {self.mode!r}")
        if self.mode == "imported":
            if self.vectors is None:
                raise ValueError("imported key store needs vectors")
            self.vectors.setflags(write=False)

    @property
    def total_rows(self) -> int:
        return len(self.token_ids)

    def index_map(self, ch) -> list:
        return self.index_maps[ch if ch in self.offsets else UNK_CHAR]

    def row_slice(self, ch) -> slice:
        start, count = self.offsets[ch if ch in self.offsets else UNK_CHAR]
        return slice(start, start + count)

    def matrix(self, ch, key_table: Tensor | None = None) -> Tensor:
        """K_i for one character, shape (rows, d_model)."""
        sl = self.row_slice(ch)
        if self.mode == "imported":
            return Tensor(self.vectors[sl])
        if key_table is None:
            raise ValueError("trainable key store needs the key-embedding table")
        return embedding_lookup(key_table, self.token_ids[sl])


def _records_with_unk(d: Dictionary) -> list[CharacterRecord]:
    return list(d) + ([UNK_RECORD] if UNK_CHAR not in d else [])


def build_key_store(d: Dictionary, mode: str, source=None, vocab: Vocab | None = None, d_model: int | None = None) -> KeyStore:
    """Lay out key rows for every record (plus the unknown record).

    ``source`` (imported mode) maps (char, pron_index, token_index) to vectors,
    as returned by :func:`read_key_file`; the unknown record gets a zero row
    if the source has none.
    """
    vocab = vocab or char_vocab(d)
    chars, offsets, maps, ids = [], {}, {}, []
    for rec in _records_with_unk(d):
        start = len(ids)
        imap = [(j, k) for j, g in enumerate(rec.glosses) for k in range(g.token_count)]
        ids.extend(vocab.id(rec.glosses[j].tokens[k]) for j, k in imap)
        chars.append(rec.char)
        offsets[rec.char] = (start, len(imap))
        maps[rec.char] = imap
    token_ids = np.array(ids, dtype=np.int64)
    vectors = None
    if mode == "imported":
        if source is None:
            raise ValueError("imported mode needs an embedding source")
        width = source.d_model
        if d_model is not None and width != d_model:
            raise ShapeError(f"key file width {width} does not match d_model {d_model}")
        d_model = width
        vectors = np.zeros((len(ids), width), dtype=np.float32)
        missing = []
        for ch in chars:
            start, _ = offsets[ch]
            for r, (j, k) in enumerate(maps[ch]):
                vec = source.rows.get((ch, j, k))
                if vec is None:
                    if ch != UNK_CHAR:
                        missing.append((ch, j, k))
                    continue
                vectors[start + r] = vec
        if missing:
            raise KeyError(f"key file lacks {len(missing)} gloss rows, first: {missing[0]}")
    elif d_model is None:
        raise ValueError("trainable mode needs d_model")
    return KeyStore(mode, d_model, chars, offsets, maps, token_ids, vectors)


@dataclass
class KeyFile:
    d_model: int
    rows: dict  # (char, pron_index, token_index) -> float32 vector


def write_key_file(path, d_model: int, rows) -> None:
    """``rows``: iterable of (char, pron_index, token_index, vector)."""
    rows = list(rows)
    buf = io.BytesIO()
    buf.write(KEY_MAGIC)
    buf.write(struct.pack("<IIQ", KEY_VERSION, d_model, len(rows)))
    for ch, j, k, vec in rows:
        vec = np.asarray(vec, dtype="<f4")
        if vec.shape != (d_model,):
            raise ShapeError(f"key row for {(ch, j, k)} has shape {vec.shape}, expected ({d_model},)")
        raw = ch.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<HI", j, k))
        buf.write(vec.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_key_file(path) -> KeyFile:
    from .dictionary import CorruptFileError, VersionMismatchError

    data = Path(path).read_bytes()
    if data[:4] != KEY_MAGIC:
        raise CorruptFileError("not a key file (bad magic)")
    if len(data) < 20:
        raise CorruptFileError("key file header is truncated")
    version, d_model, count = struct.unpack_from("<IIQ", data, 4)
    if version != KEY_VERSION:
        raise VersionMismatchError(f"key file version {version}, expected {KEY_VERSION}")
    pos, rows = 20, {}
    vec_bytes = 4 * d_model
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            ch = data[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            j, k = struct.unpack_from("<HI", data, pos)
            pos += 6
            if pos + vec_bytes > len(data):
                raise CorruptFileError("key file is truncated")
            rows[(ch, j, k)] = np.frombuffer(data, dtype="<f4", count=d_model, offset=pos).astype(np.float32)
            pos += vec_bytes
    except (struct.error, UnicodeDecodeError):
        raise CorruptFileError("key file is truncated or corrupt") from None
    if pos != len(data):
        raise CorruptFileError("trailing bytes in key file")
    return KeyFile(d_model, rows)


def key_store_rows(store: KeyStore):
    """Rows of an imported store in key-file order, for re-export."""
    for ch in store.chars:
        start, _ = store.offsets[ch]
        for r, (j, k) in enumerate(store.index_maps[ch]):
            yield ch, j, k, store.vectors[start + r]


# ---------------------------------------------------------------------------
# parameters


def _linear(rng, params, name, fan_in, fan_out, dtype):
    params[f"{name}.w"] = rng.normal(0.0, fan_in**-0.5, (fan_in, fan_out)).astype(dtype)
    params[f"{name}.b"] = np.zeros(fan_out, dtype=dtype)


def init_stack_params(rng: np.random.Generator, prefix: str, layers: int, cfg: EncoderConfig, dtype=np.float64) -> dict:
    D = cfg.d_model
    dh = D // cfg.heads
    R = 2 * cfg.rel_clip + 1
    params = {}
    for i in range(layers):
        p = f"{prefix}.{i}"
        for proj in ("q", "k", "v", "o"):
            _linear(rng, params, f"{p}.attn.{proj}", D, D, dtype)
        params[f"{p}.attn.rel_k"] = rng.normal(0.0, dh**-0.5, (R, dh)).astype(dtype)
        params[f"{p}.attn.rel_v"] = rng.normal(0.0, dh**-0.5, (R, dh)).astype(dtype)
        params[f"{p}.ln1.g"] = np.ones(D, dtype=dtype)
        params[f"{p}.ln1.b"] = np.zeros(D, dtype=dtype)
        _linear(rng, params, f"{p}.ffn.conv", cfg.conv_kernel * D, cfg.ffn_mult * D, dtype)
        _linear(rng, params, f"{p}.ffn.out", cfg.ffn_mult * D, D, dtype)
        params[f"{p}.ln2.g"] = np.ones(D, dtype=dtype)
        params[f"{p}.ln2.b"] = np.zeros(D, dtype=dtype)
    return params


# ---------------------------------------------------------------------------
# blocks


@lru_cache(maxsize=256)
def relative_onehot(length: int, clip: int) -> np.ndarray:
    """E[i, r, j] = 1 where r = clip(j - i, -clip, clip) + clip; shape (L, 2c+1, L)."""
    offs = np.arange(length)[None, :] - np.arange(length)[:, None]
    idx = np.clip(offs, -clip, clip) + clip
    E = np.zeros((length, 2 * clip + 1, length))
    E[np.arange(length)[:, None], idx, np.arange(length)[None, :]] = 1.0
    E.setflags(write=False)
    return E


def _dense(x, params, name):
    return add(matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, D = x.shape
    return transpose(reshape(x, (B, L, heads, D // heads)), (0, 2, 1, 3))


def attention_logits(x: Tensor, params: dict, prefix: str, cfg: EncoderConfig):
    """Pre-softmax relative-position attention logits (B, H, L, L), plus the
    projected values and the relative one-hot used to build them."""
    B, L, D = x.shape
    H, dh = cfg.heads, D // cfg.heads
    q = _split_heads(_dense(x, params, f"{prefix}.q"), H)
    k = _split_heads(_dense(x, params, f"{prefix}.k"), H)
    v = _split_heads(_dense(x, params, f"{prefix}.v"), H)
    E = relative_onehot(L, cfg.rel_clip).astype(x.dtype)
    R = E.shape[1]
    content = matmul(q, transpose(k, (0, 1, 3, 2)))
    qr = matmul(q, transpose(params[f"{prefix}.rel_k"], (1, 0)))  # (B, H, L, R)
    position = reshape(matmul(reshape(qr, (B, H, L, 1, R)), E), (B, H, L, L))
    return mul(add(content, position), dh**-0.5), v, E


def self_attention(x: Tensor, mask: np.ndarray, params: dict, prefix: str, cfg: EncoderConfig) -> Tensor:
    B, L, D = x.shape
    H = cfg.heads
    logits, v, E = attention_logits(x, params, prefix, cfg)
    probs = softmax_lastdim(logits, mask[:, None, None, :])
    R = E.shape[1]
    ctx = matmul(probs, v)
    rel = reshape(matmul(reshape(probs, (B, H, L, 1, L)), np.ascontiguousarray(E.transpose(0, 2, 1))), (B, H, L, R))
    ctx = add(ctx, matmul(rel, params[f"{prefix}.rel_v"]))
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (B, L, D))
    return _dense(merged, params, f"{prefix}.o")


def fft_block(x: Tensor, mask: np.ndarray, params: dict, prefix: str, cfg: EncoderConfig) -> Tensor:
    keep = mask[..., None].astype(x.dtype)
    h = layer_norm(add(x, self_attention(x, mask, params, f"{prefix}.attn", cfg)), params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    h = mul(h, keep)
    f = relu(_dense(unfold1d(h, cfg.conv_kernel), params, f"{prefix}.ffn.conv"))
    f = _dense(f, params, f"{prefix}.ffn.out")
    out = layer_norm(add(h, f), params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return mul(out, keep)


def run_stack(x: Tensor, mask: np.ndarray, params: dict, prefix: str, layers: int, cfg: EncoderConfig) -> Tensor:
    for i in range(layers):
        x = fft_block(x, mask, params, f"{prefix}.{i}", cfg)
    return x


def _batched(ids, mask):
    ids = np.asarray(ids)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None]
    if mask is None:
        mask = np.ones(ids.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(ids.shape)
    return ids, mask, squeeze


@dataclass
class SemanticContext:
    token_ids: np.ndarray
    z: Tensor  # (l, d_model) or (B, l, d_model)


def encode_semantic(token_ids, params: dict, cfg: EncoderConfig, mask=None) -> SemanticContext:
    """Context vectors z for a sentence (l,) or a padded batch (B, l)."""
    ids, mask, squeeze = _batched(token_ids, mask)
    if ids.shape[-1] == 0:
        raise ValueError("cannot encode an empty sentence")
    table = params["char_emb"]
    x = mul(embedding_lookup(table, ids), math.sqrt(cfg.d_model))
    z = run_stack(x, mask, params, "sem", cfg.semantic_layers, cfg)
    if squeeze:
        z = reshape(z, z.shape[1:])
    return SemanticContext(np.asarray(token_ids), z)


def encode_linguistic(p_mixed, s_retrieved, params: dict, cfg: EncoderConfig, mask=None) -> Tensor:
    """Fuse mixed pronunciation and retrieved semantics (added) through the
    linguistic stack.  Inputs are (l, d) or (B, l, d)."""
    p_mixed, s_retrieved = as_tensor(p_mixed), as_tensor(s_retrieved)
    if p_mixed.shape != s_retrieved.shape:
        raise ShapeError(f"pronunciation {p_mixed.shape} and semantics {s_retrieved.shape} differ")
    squeeze = p_mixed.ndim == 2
    x = add(p_mixed, s_retrieved)
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.shape[1] == 0:
        raise ValueError("cannot encode an empty sentence")
    if x.shape[-1] != cfg.d_model:
        raise ShapeError(f"width {x.shape[-1]} does not match d_model {cfg.d_model}")
    mask = np.ones(x.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(x.shape[:2])
    g = run_stack(x, mask, params, "ling", cfg.linguistic_layers, cfg)
    return reshape(g, g.shape[1:]) if squeeze else g
