"""Pronunciation dictionary: parsing, validation, lookup and binary snapshots.

Text format (UTF-8)::

    dictg2p-dict v1
    {"char": "乐", "prons": [{"pron": "L E4", "gloss": "快乐"}, {"pron": "Y UE4", "gloss": "音乐"}]}

One character per line.  Entries that repeat a pronunciation have their
glosses merged, so every pronunciation owns exactly one gloss sequence.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

HEADER = "dictg2p-dict v1"
SNAPSHOT_MAGIC = b"DGPD"
SNAPSHOT_VERSION = 1
DEFAULT_MAX_GLOSS = 64

UNK_CHAR = "<unk>"
UNK_PHONEME = "<unk>"


class DictionaryError(ValueError):
    pass


class DictionaryParseError(DictionaryError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno
        self.reason = message


class OOVError(KeyError):
    def __init__(self, ch):
        super().__init__(ch)
        self.char = ch

    def __str__(self):
        return f"character {self.char!r} is not in the dictionary"


class CorruptFileError(DictionaryError):
    pass


class VersionMismatchError(DictionaryError):
    pass


@dataclass(frozen=True)
class Pronunciation:
    phonemes: tuple[str, ...]
    index: int

    def __post_init__(self):
        if not self.phonemes:
            raise DictionaryError("pronunciation has no phonemes")

    def __str__(self):
        return " ".join(self.phonemes)


@dataclass(frozen=True)
class GlossEntry:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens:
            raise DictionaryError("gloss entry has no tokens")

    @property
    def token_count(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class CharacterRecord:
    char: str
    prons: tuple[Pronunciation, ...]
    glosses: tuple[GlossEntry, ...]

    def __post_init__(self):
        if not self.prons:
            raise DictionaryError(f"{self.char!r}: empty pronunciation list")
        if len(self.prons) != len(self.glosses):
            raise DictionaryError(f"{self.char!r}: {len(self.prons)} pronunciations but {len(self.glosses)} glosses")
        if [p.index for p in self.prons] != list(range(len(self.prons))):
            raise DictionaryError(f"{self.char!r}: pronunciation indices must run 0..m-1 in order")

    @property
    def m(self) -> int:
        return len(self.prons)

    @property
    def is_polyphone(self) -> bool:
        return len(self.prons) > 1

    @property
    def entries(self):
        return list(zip(self.prons, self.glosses))


def tokenize_gloss(text: str, max_tokens: int = DEFAULT_MAX_GLOSS) -> tuple[str, ...]:
    """Character-level gloss tokens, whitespace dropped, tail truncated."""
    return tuple(ch for ch in text if not ch.isspace())[:max_tokens]


def make_record(char: str, entries: Iterable[tuple[str, str]], max_gloss: int = DEFAULT_MAX_GLOSS) -> CharacterRecord:
    """Build a record from (pronunciation string, gloss text) pairs.

    Repeated pronunciations are merged into one gloss.  A pronunciation whose
    merged gloss is empty gets the character itself as its only gloss token.
    """
    merged: dict[tuple[str, ...], str] = {}
    for pron, gloss in entries:
        phonemes = tuple(pron.split())
        if not phonemes:
            raise DictionaryError(f"{char!r}: empty pronunciation")
        merged[phonemes] = merged.get(phonemes, "") + gloss
    prons, glosses = [], []
    for j, (phonemes, gloss) in enumerate(merged.items()):
        prons.append(Pronunciation(phonemes, j))
        glosses.append(GlossEntry(tokenize_gloss(gloss, max_gloss) or (char,)))
    return CharacterRecord(char, tuple(prons), tuple(glosses))


UNK_RECORD = CharacterRecord(UNK_CHAR, (Pronunciation((UNK_PHONEME,), 0),), (GlossEntry((UNK_CHAR,)),))


@dataclass(frozen=True)
class DictStats:
    n: int
    polyphones: int
    max_m: int
    max_u: int
    phonemes: int


@dataclass(frozen=True, eq=False)
class Dictionary:
    records: dict = field(default_factory=dict)
    max_gloss: int = DEFAULT_MAX_GLOSS

    def __post_init__(self):
        for ch, rec in self.records.items():
            if ch != rec.char:
                raise DictionaryError(f"record for {rec.char!r} stored under {ch!r}")

    def __eq__(self, other):
        if not isinstance(other, Dictionary):
            return NotImplemented
        return self.max_gloss == other.max_gloss and list(self.records.items()) == list(other.records.items())

    def __len__(self):
        return len(self.records)

    def __contains__(self, ch):
        return ch in self.records

    def __iter__(self):
        return iter(self.records.values())

    @property
    def size(self) -> int:
        return len(self.records)

    @property
    def chars(self) -> list[str]:
        return list(self.records)

    @property
    def phoneme_inventory(self) -> frozenset[str]:
        return frozenset(ph for rec in self.records.values() for p in rec.prons for ph in p.phonemes)

    def lookup(self, ch: str) -> CharacterRecord:
        try:
            return self.records[ch]
        except KeyError:
            raise OOVError(ch) from None

    def resolve(self, ch: str) -> CharacterRecord:
        """Like :meth:`lookup`, but unseen characters get the reserved unknown record."""
        return self.records.get(ch, UNK_RECORD)


def lookup(d: Dictionary, ch: str) -> CharacterRecord:
    return d.lookup(ch)


def dictionary_stats(d: Dictionary) -> DictStats:
    recs = list(d.records.values())
    return DictStats(
        n=len(recs),
        polyphones=sum(r.is_polyphone for r in recs),
        max_m=max((r.m for r in recs), default=0),
        max_u=max((g.token_count for r in recs for g in r.glosses), default=0),
        phonemes=len(d.phoneme_inventory),
    )


# ---------------------------------------------------------------------------
# text format


def _parse_line(line: str, lineno: int, max_gloss: int) -> CharacterRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        if "escape" in exc.msg:
            raise DictionaryParseError(lineno, f"unknown escape at column {exc.colno}") from None
        raise DictionaryParseError(lineno, f"malformed record: {exc.msg} at column {exc.colno}") from None
    if not isinstance(obj, dict) or set(obj) != {"char", "prons"}:
        raise DictionaryParseError(lineno, 'record must be an object with exactly "char" and "prons"')
    ch, prons = obj["char"], obj["prons"]
    if not isinstance(ch, str) or len(ch) != 1:
        raise DictionaryParseError(lineno, f"char must be a single character, got {ch!r}")
    if not isinstance(prons, list):
        raise DictionaryParseError(lineno, "prons must be a list")
    if not prons:
        raise DictionaryParseError(lineno, f"{ch!r}: empty pronunciation list")
    pairs = []
    for entry in prons:
        if not isinstance(entry, dict) or not isinstance(entry.get("pron"), str) or not isinstance(entry.get("gloss", ""), str):
            raise DictionaryParseError(lineno, f"{ch!r}: each entry needs a string pron and gloss")
        pairs.append((entry["pron"], entry.get("gloss", "")))
    try:
        return make_record(ch, pairs, max_gloss)
    except DictionaryError as exc:
        raise DictionaryParseError(lineno, str(exc)) from None


def parse_dictionary(lines: Iterable[str], max_gloss: int = DEFAULT_MAX_GLOSS, errors: list | None = None) -> Dictionary:
    """Parse the line-delimited text format.

    With ``errors=None`` the first bad line raises :class:`DictionaryParseError`.
    Given a list, bad lines are appended to it as errors and parsing goes on,
    so every record line ends up either as a record or as an error.
    """
    it = iter(lines)
    first = next(it, None)
    if first is None:
        return Dictionary({}, max_gloss)
    if first.strip() != HEADER:
        raise VersionMismatchError(f"expected header {HEADER!r}, got {first.strip()!r}")
    records: dict[str, CharacterRecord] = {}
    for lineno, raw in enumerate(it, start=2):
        line = raw.rstrip("\r\n")
        try:
            if not line.strip():
                raise DictionaryParseError(lineno, "blank line")
            rec = _parse_line(line, lineno, max_gloss)
            if rec.char in records:
                raise DictionaryParseError(lineno, f"duplicate character {rec.char!r}")
            records[rec.char] = rec
        except DictionaryParseError as exc:
            if errors is None:
                raise
            errors.append(exc)
    return Dictionary(records, max_gloss)


def format_dictionary(d: Dictionary) -> str:
    out = [HEADER]
    for rec in d:
        prons = [{"pron": str(p), "gloss": "".join(g.tokens)} for p, g in rec.entries]
        out.append(json.dumps({"char": rec.char, "prons": prons}, ensure_ascii=False))
    return "\n".join(out) + "\n"


def read_dictionary_text(path, max_gloss: int = DEFAULT_MAX_GLOSS) -> Dictionary:
    with open(path, encoding="utf-8") as f:
        return parse_dictionary(f, max_gloss)


def write_dictionary_text(d: Dictionary, path) -> None:
    Path(path).write_text(format_dictionary(d), encoding="utf-8")


# ---------------------------------------------------------------------------
# binary snapshot


def _put_str(buf, s: str):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptFileError("snapshot is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptFileError("invalid UTF-8 in snapshot") from None


def _encode_record(rec: CharacterRecord) -> bytes:
    buf = io.BytesIO()
    _put_str(buf, rec.char)
    buf.write(struct.pack("<H", rec.m))
    for p, g in rec.entries:
        _put_str(buf, str(p))
        buf.write(struct.pack("<I", g.token_count))
        for tok in g.tokens:
            _put_str(buf, tok)
    return buf.getvalue()


def _decode_record(payload: bytes) -> CharacterRecord:
    r = _Reader(payload)
    ch = r.string()
    (m,) = r.unpack("<H")
    prons, glosses = [], []
    for j in range(m):
        prons.append(Pronunciation(tuple(r.string().split()), j))
        (u,) = r.unpack("<I")
        glosses.append(GlossEntry(tuple(r.string() for _ in range(u))))
    if r.pos != len(payload):
        raise CorruptFileError(f"trailing bytes in record for {ch!r}")
    return CharacterRecord(ch, tuple(prons), tuple(glosses))


def dictionary_to_bytes(d: Dictionary) -> bytes:
    buf = io.BytesIO()
    buf.write(SNAPSHOT_MAGIC)
    buf.write(struct.pack("<III", SNAPSHOT_VERSION, d.max_gloss, len(d)))
    for rec in d:
        payload = _encode_record(rec)
        buf.write(struct.pack("<I", len(payload)))
        buf.write(payload)
    return buf.getvalue()


def dictionary_from_bytes(data: bytes) -> Dictionary:
    r = _Reader(data)
    if r.take(4) != SNAPSHOT_MAGIC:
        raise CorruptFileError("not a dictionary snapshot (bad magic)")
    (version,) = r.unpack("<I")
    if version != SNAPSHOT_VERSION:
        raise VersionMismatchError(f"snapshot version {version}, expected {SNAPSHOT_VERSION}")
    max_gloss, count = r.unpack("<II")
    records = {}
    try:
        for _ in range(count):
            (n,) = r.unpack("<I")
            rec = _decode_record(r.take(n))
            if rec.char in records:
                raise CorruptFileError(f"duplicate character {rec.char!r} in snapshot")
            records[rec.char] = rec
    except DictionaryError as exc:
        if isinstance(exc, CorruptFileError):
            raise
        raise CorruptFileError(str(exc)) from None
    if r.pos != len(data):
        raise CorruptFileError("trailing bytes after last record")
    return Dictionary(records, max_gloss)


def save_dictionary(d: Dictionary, path) -> None:
    Path(path).write_bytes(dictionary_to_bytes(d))


def load_dictionary(path) -> Dictionary:
    """Load a binary snapshot, or the text format if the file starts with the text header."""
    data = Path(path).read_bytes()
    if data.startswith(HEADER.encode("utf-8")):
        return parse_dictionary(data.decode("utf-8").splitlines())
    return dictionary_from_bytes(data)
