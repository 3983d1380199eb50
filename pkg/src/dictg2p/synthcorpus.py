"""Synthetic language with context-governed polyphones.

Every monophone belongs to one of ``n_classes`` context classes.  Each reading
of a polyphone is governed by a distinct class, and a polyphone occurrence is
read according to the class that wins a vote among its neighbours within two
positions (ordered i-1, i+1, i-2, i+2; ties go to the earliest in that order,
so the left neighbour wins a tie at equal distance).

Gloss tokens of a reading are monophones of its governing class, and their key
vectors are the class vector plus Gaussian noise, so the right reading is
recoverable from context only through the dictionary.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dictionary import Dictionary, make_record, write_dictionary_text
from .encoders import KeyFile, read_key_file, write_key_file

INITIALS = ["B", "P", "M", "F", "D", "T", "N", "L", "G", "K", "H", "J", "Q", "X", "ZH", "CH", "SH", "R", "Z", "C", "S", "Y", "W"]
FINALS = ["A", "O", "E", "I", "U", "AI", "EI", "AO", "OU", "AN", "EN", "ANG", "ENG", "ONG", "UO", "IE"]
VOTE_ORDER = (-1, 1, -2, 2)
FIRST_CHAR = 0x4E00


class InfeasibleSpecError(ValueError):
    pass


@dataclass
class ToyLanguageSpec:
    seed: int
    n_classes: int
    d_model: int
    n_features: int
    chars: list  # str per character
    char_class: list  # monophone class, -1 for polyphones
    prons: list  # per character: list of pronunciation strings
    governing: list  # per character: class governing each reading
    glosses: list  # per character: list of gloss strings
    class_vectors: np.ndarray  # (n_classes, d_model), unit norm
    phonemes: list
    codebook: np.ndarray  # (n_phonemes, n_features)
    key_sigma: float = 0.05
    acoustic_sigma: float = 0.01
    min_len: int = 6
    max_len: int = 12
    char_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.char_index = {c: i for i, c in enumerate(self.chars)}

    @property
    def polyphones(self) -> list:
        return [i for i, c in enumerate(self.char_class) if c < 0]

    @property
    def monophones(self) -> list:
        return [i for i, c in enumerate(self.char_class) if c >= 0]

    def class_members(self, c: int) -> list:
        return [i for i, k in enumerate(self.char_class) if k == c]

    def acoustic_mean(self, char: int, pron: int) -> np.ndarray:
        ph = self.prons[char][pron].split()
        idx = [self.phonemes.index(p) for p in ph]
        return self.codebook[idx].mean(axis=0)

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("char_index", None)
        out["class_vectors"] = self.class_vectors.tolist()
        out["codebook"] = self.codebook.tolist()
        return out

    @classmethod
    def from_json(cls, obj: dict):
        obj = dict(obj)
        obj["class_vectors"] = np.array(obj["class_vectors"])
        obj["codebook"] = np.array(obj["codebook"])
        return cls(**obj)


@dataclass
class GeneratedCorpus:
    sentences: list  # str
    labels: list  # np.ndarray of pron indices per sentence
    targets: list  # np.ndarray (l, n_features) per sentence
    splits: list  # "train" / "heldout"
    polyphone_masks: list  # np.ndarray bool per sentence

    def __len__(self):
        return len(self.sentences)

    def subset(self, split: str) -> "GeneratedCorpus":
        keep = [i for i, s in enumerate(self.splits) if s == split]
        return GeneratedCorpus(
            [self.sentences[i] for i in keep],
            [self.labels[i] for i in keep],
            [self.targets[i] for i in keep],
            [self.splits[i] for i in keep],
            [self.polyphone_masks[i] for i in keep],
        )


def _unit_vectors(rng, n, d, max_cos=0.5, tries=1000):
    for _ in range(tries):
        v = rng.normal(size=(n, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v = v.astype(np.float32).astype(np.float64)
        cos = v @ v.T
        if n < 2 or np.max(cos[~np.eye(n, dtype=bool)]) < max_cos:
            return v
    raise InfeasibleSpecError(f"could not place {n} class vectors in {d} dimensions with cosine < {max_cos}")


def generate_spec(
    n_chars: int = 60,
    n_polyphones: int = 12,
    n_classes: int = 4,
    seed: int = 0,
    d_model: int = 64,
    n_features: int = 16,
    max_m: int = 3,
    key_sigma: float = 0.05,
    acoustic_sigma: float = 0.01,
    gloss_len: tuple = (3, 6),
) -> ToyLanguageSpec:
    if n_classes < 2:
        raise InfeasibleSpecError("need at least 2 context classes")
    max_m = min(max_m, n_classes)
    if max_m < 2 and n_polyphones:
        raise InfeasibleSpecError("polyphones need at least 2 readings")
    if n_chars - n_polyphones < n_classes:
        raise InfeasibleSpecError("every class needs at least one monophone")
    if n_chars > 20000:
        raise InfeasibleSpecError("character inventory too large")
    rng = np.random.default_rng(seed)

    chars = [chr(FIRST_CHAR + i) for i in range(n_chars)]
    poly = set(rng.choice(n_chars, size=n_polyphones, replace=False).tolist())
    mono = [i for i in range(n_chars) if i not in poly]
    order = rng.permutation(len(mono))
    char_class = [-1] * n_chars
    for rank, idx in enumerate(order):
        char_class[mono[idx]] = rank % n_classes

    syllables = [f"{a} {b}{t}" for a in INITIALS for b in FINALS for t in "1234"]
    prons, governing = [], []
    for i in range(n_chars):
        if i in poly:
            m = int(rng.integers(2, max_m + 1))
            gov = rng.choice(n_classes, size=m, replace=False).tolist()
        else:
            m, gov = 1, [char_class[i]]
        picks = rng.choice(len(syllables), size=m, replace=False)
        prons.append([syllables[k] for k in picks])
        governing.append(gov)

    phonemes = sorted({ph for ps in prons for p in ps for ph in p.split()})
    class_vectors = _unit_vectors(rng, n_classes, d_model)
    while True:
        codebook = rng.normal(size=(len(phonemes), n_features))
        if len(np.unique(codebook.round(6), axis=0)) == len(phonemes):
            break

    members = [[i for i in mono if char_class[i] == c] for c in range(n_classes)]
    glosses = []
    for i in range(n_chars):
        row = []
        for c in governing[i]:
            u = int(rng.integers(gloss_len[0], gloss_len[1] + 1))
            row.append("".join(chars[k] for k in rng.choice(members[c], size=u)))
        glosses.append(row)

    return ToyLanguageSpec(
        seed=seed,
        n_classes=n_classes,
        d_model=d_model,
        n_features=n_features,
        chars=chars,
        char_class=char_class,
        prons=prons,
        governing=governing,
        glosses=glosses,
        class_vectors=class_vectors,
        phonemes=phonemes,
        codebook=codebook,
        key_sigma=key_sigma,
        acoustic_sigma=acoustic_sigma,
    )


def ground_truth(spec: ToyLanguageSpec, sentence: list, position: int) -> int:
    """Reading of the character at ``position`` (character indices in ``sentence``)."""
    ch = sentence[position]
    gov = spec.governing[ch]
    if len(gov) == 1:
        return 0
    votes: dict[int, int] = {}
    first_seen: dict[int, int] = {}
    for rank, off in enumerate(VOTE_ORDER):
        k = position + off
        if 0 <= k < len(sentence):
            cls = spec.char_class[sentence[k]]
            if cls in gov:
                votes[cls] = votes.get(cls, 0) + 1
                first_seen.setdefault(cls, rank)
    if not votes:
        return 0
    winner = max(votes, key=lambda c: (votes[c], -first_seen[c]))
    return gov.index(winner)


def _place_polyphones(rng, length, count, spacing=3, tries=100):
    for _ in range(tries):
        pos = sorted(rng.choice(length, size=count, replace=False).tolist())
        if all(b - a >= spacing for a, b in zip(pos, pos[1:])):
            return pos
    return pos[:1]


def generate_corpus(
    spec: ToyLanguageSpec,
    n_sentences: int,
    seed: int,
    n_heldout: int | None = None,
    polyphone_counts=(0.1, 0.5, 0.4),
) -> GeneratedCorpus:
    """``n_sentences`` training sentences followed by ``n_heldout`` held-out ones
    (default a tenth of the training count, at least one)."""
    if n_heldout is None:
        n_heldout = max(1, n_sentences // 10)
    rng = np.random.default_rng([seed, spec.seed])
    poly = spec.polyphones
    members = [spec.class_members(c) for c in range(spec.n_classes)]
    mono = spec.monophones
    bags: dict[int, list] = {}

    def next_reading(ch):
        bag = bags.get(ch)
        if not bag:
            bag = bags[ch] = rng.permutation(len(spec.prons[ch])).tolist()
        return bag.pop()

    sentences, labels, targets, splits, masks = [], [], [], [], []
    for n in range(n_sentences + n_heldout):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        count = int(rng.choice(len(polyphone_counts), p=polyphone_counts)) if poly else 0
        seq = [int(rng.choice(mono)) for _ in range(length)]
        planned = {}
        for p in _place_polyphones(rng, length, count) if count else []:
            ch = int(rng.choice(poly))
            j = next_reading(ch)
            seq[p] = ch
            planned[p] = j
            cls = spec.governing[ch][j]
            for q in (p - 1, p + 1):
                if 0 <= q < length:
                    seq[q] = int(rng.choice(members[cls]))
        lab = np.array([ground_truth(spec, seq, i) for i in range(length)], dtype=np.int64)
        for p, j in planned.items():
            if lab[p] != j:
                raise AssertionError(f"generator placed reading {j} at {p} but context votes for {lab[p]}")
        mean = np.stack([spec.acoustic_mean(c, int(j)) for c, j in zip(seq, lab)])
        noise = rng.normal(0.0, spec.acoustic_sigma, size=mean.shape)
        sentences.append("".join(spec.chars[c] for c in seq))
        labels.append(lab)
        targets.append(mean + noise)
        splits.append("train" if n < n_sentences else "heldout")
        masks.append(np.array([spec.char_class[c] < 0 for c in seq]))
    return GeneratedCorpus(sentences, labels, targets, splits, masks)


def emit_oracle_dictionary(spec: ToyLanguageSpec, key_sigma: float | None = None) -> tuple[Dictionary, KeyFile]:
    """The toy dictionary and its frozen key vectors (class vector + noise per gloss token)."""
    sigma = spec.key_sigma if key_sigma is None else key_sigma
    rng = np.random.default_rng([spec.seed, 7919])
    records = {}
    rows = {}
    for i, ch in enumerate(spec.chars):
        rec = make_record(ch, list(zip(spec.prons[i], spec.glosses[i])))
        records[ch] = rec
        for j, g in enumerate(rec.glosses):
            for k, tok in enumerate(g.tokens):
                cls = spec.char_class[spec.char_index[tok]]
                vec = spec.class_vectors[cls] + (rng.normal(0.0, sigma, spec.d_model) if sigma > 0 else 0.0)
                rows[(ch, j, k)] = vec.astype(np.float32)
    return Dictionary(records), KeyFile(spec.d_model, rows)


def oracle_accuracy(predictions, corpus: GeneratedCorpus) -> tuple[float, float]:
    """(polyphone accuracy, overall accuracy) of per-position reading indices."""
    if len(predictions) != len(corpus.labels):
        raise ValueError(f"{len(predictions)} predictions for {len(corpus.labels)} sentences")
    hit_poly = n_poly = hit_all = n_all = 0
    for pred, lab, mask in zip(predictions, corpus.labels, corpus.polyphone_masks):
        pred = np.asarray(pred)
        if pred.shape != lab.shape:
            raise ValueError(f"prediction length {pred.shape} does not match labels {lab.shape}")
        ok = pred == lab
        hit_all += int(ok.sum())
        n_all += len(lab)
        hit_poly += int(ok[mask].sum())
        n_poly += int(mask.sum())
    return (hit_poly / n_poly if n_poly else float("nan")), (hit_all / n_all if n_all else float("nan"))


# ---------------------------------------------------------------------------
# corpus directory


def write_corpus_dir(out, spec: ToyLanguageSpec, corpus: GeneratedCorpus) -> None:
    """spec.json, dict.txt, keys.bin, corpus.jsonl, acoustics.npz, labels.txt."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(spec.to_json()), encoding="utf-8")
    d, keys = emit_oracle_dictionary(spec)
    write_dictionary_text(d, out / "dict.txt")
    write_key_file(out / "keys.bin", keys.d_model, ((ch, j, k, v) for (ch, j, k), v in keys.rows.items()))
    with open(out / "corpus.jsonl", "w", encoding="utf-8") as f:
        for i, (s, split) in enumerate(zip(corpus.sentences, corpus.splits)):
            f.write(json.dumps({"id": i, "split": split, "text": s}, ensure_ascii=False) + "\n")
    offsets = np.cumsum([0] + [len(t) for t in corpus.targets])
    np.savez(out / "acoustics.npz", feats=np.concatenate(corpus.targets), offsets=offsets)
    with open(out / "labels.txt", "w", encoding="utf-8") as f:
        for i, lab in enumerate(corpus.labels):
            for pos, j in enumerate(lab):
                f.write(f"{i}\t{pos}\t{int(j)}\n")


def read_labels(path) -> dict:
    """sentence id -> {position: pron_index}."""
    out: dict[int, dict] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                sid, pos, j = map(int, line.split())
                out.setdefault(sid, {})[pos] = j
    return out


def read_corpus_dir(path, with_labels: bool = True):
    """(spec or None, corpus, dictionary path, key path).  ``labels`` are
    empty arrays when ``with_labels`` is false or no sidecar exists."""
    path = Path(path)
    spec = None
    if (path / "spec.json").exists():
        spec = ToyLanguageSpec.from_json(json.loads((path / "spec.json").read_text(encoding="utf-8")))
    rows = [json.loads(line) for line in (path / "corpus.jsonl").read_text(encoding="utf-8").splitlines() if line.strip()]
    ac = np.load(path / "acoustics.npz")
    feats, offsets = ac["feats"], ac["offsets"]
    labels_by_id = read_labels(path / "labels.txt") if with_labels and (path / "labels.txt").exists() else {}
    sentences, labels, targets, splits, masks = [], [], [], [], []
    for r in rows:
        i = r["id"]
        s = r["text"]
        sentences.append(s)
        splits.append(r["split"])
        targets.append(feats[offsets[i] : offsets[i + 1]])
        lab = labels_by_id.get(i, {})
        labels.append(np.array([lab[p] for p in range(len(s))], dtype=np.int64) if lab else np.zeros(0, dtype=np.int64))
        if spec is not None:
            masks.append(np.array([spec.char_class[spec.char_index[c]] < 0 for c in s]))
        else:
            masks.append(np.zeros(len(s), dtype=bool))
    return spec, GeneratedCorpus(sentences, labels, targets, splits, masks), path / "dict.txt", path / "keys.bin"


def load_key_source(path) -> KeyFile:
    return read_key_file(path)
