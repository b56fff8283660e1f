"""Caption corpora, vocabulary statistics and region-feature files."""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

START, END, UNK, PAD = "<start>", "<end>", "<unk>", "<pad>"
SPECIALS = (START, END, UNK, PAD)
START_ID, END_ID, UNK_ID, PAD_ID = 0, 1, 2, 3

FVEC_MAGIC = b"FVEC"
FVEC_VERSION = 1
_FVEC_HEADER = struct.Struct("<4sIII")

_PUNCT = re.compile(r"[^\w\s]|_", re.UNICODE)


class DataError(ValueError):
    pass


class FeatureFormatError(DataError):
    """Base class for malformed ``.fvec`` files."""


class BadMagicError(FeatureFormatError):
    pass


class UnsupportedVersionError(FeatureFormatError):
    pass


class TruncatedPayloadError(FeatureFormatError):
    pass


class NonFiniteFeatureError(FeatureFormatError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    tokens = _PUNCT.sub(" ", text.lower()).split()
    if not tokens:
        raise DataError(f"no tokens left after cleaning {text!r}")
    return tokens


class Vocabulary:
    """Token/id bijection plus per-caption document frequencies.

    Ids 0..3 are always ``<start>``, ``<end>``, ``<unk>``, ``<pad>``.
    """

    def __init__(self, tokens: Sequence[str], doc_freq: dict[str, int], n_docs: int):
        if tuple(tokens[:4]) != SPECIALS:
            raise DataError("vocabulary must begin with the four special tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        self.doc_freq = {t: int(doc_freq.get(t, 0)) for t in tokens}
        self.n_docs = int(n_docs)
        for t, df in self.doc_freq.items():
            if not 0 <= df <= self.n_docs:
                raise DataError(f"doc_freq({t!r}) = {df} outside [0, {self.n_docs}]")
        self._idf = None

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other):
        return (
            isinstance(other, Vocabulary)
            and self.id_to_token == other.id_to_token
            and self.doc_freq == other.doc_freq
            and self.n_docs == other.n_docs
        )

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.lookup(t) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == END_ID:
                break
            if strip and i in (START_ID, PAD_ID):
                continue
            out.append(self.id_to_token[i])
        return out

    @property
    def idf(self) -> np.ndarray:
        """Smoothed inverse document frequency per id."""
        if self.n_docs == 0:
            raise DataError("vocabulary has no documents; IDF undefined")
        if self._idf is None:
            df = np.array([self.doc_freq[t] for t in self.id_to_token], dtype=np.float64)
            self._idf = np.log((1.0 + self.n_docs) / (1.0 + df)) + 1.0
        return self._idf

    def save(self, path) -> None:
        lines = [f"n_docs={self.n_docs}"]
        lines += [f"{t}\t{self.doc_freq[t]}" for t in self.id_to_token]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("n_docs="):
            raise DataError(f"{path}: missing n_docs header")
        n_docs = int(lines[0].split("=", 1)[1])
        tokens, df = [], {}
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            try:
                tok, count = line.split("\t")
                df[tok] = int(count)
            except ValueError:
                raise DataError(f"{path}:{lineno}: expected '<token>\\t<count>'") from None
            tokens.append(tok)
        return cls(tokens, df, n_docs)


def build_vocabulary(captions: Sequence[Sequence[str]], max_size: int) -> Vocabulary:
    """Keep the ``max_size`` most frequent tokens (ties alphabetical) plus specials."""
    if max_size <= 4:
        raise DataError(f"max_size must exceed 4, got {max_size}")
    if not captions:
        raise DataError("cannot build a vocabulary from an empty corpus")
    freq = Counter(t for cap in captions for t in cap if t not in SPECIALS)
    ranked = sorted(freq, key=lambda t: (-freq[t], t))[:max_size]
    tokens = list(SPECIALS) + ranked
    kept = set(ranked)

    df: Counter = Counter()
    for cap in captions:
        present = set(cap)
        df.update(present & kept)
        if present - kept - set(SPECIALS):
            df[UNK] += 1
    return Vocabulary(tokens, dict(df), len(captions))


@dataclass
class CaptionRecord:
    tokens: list[int]
    raw: str = ""

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise DataError("caption must contain at least one token")
        if PAD_ID in self.tokens:
            raise DataError("caption contains <pad>")

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_text(cls, text: str, vocab: Vocabulary) -> "CaptionRecord":
        return cls(vocab.encode(tokenize(text)), text)


def tfidf_weights(sentence: CaptionRecord | Sequence[int], vocab: Vocabulary) -> np.ndarray:
    """Per-position TF-IDF: count(w)/N times ln((1+n_docs)/(1+df(w))) + 1."""
    ids = sentence.tokens if isinstance(sentence, CaptionRecord) else list(sentence)
    if vocab.n_docs == 0:
        raise DataError("vocabulary has no documents; IDF undefined")
    n = len(ids)
    counts = Counter(ids)
    idf = vocab.idf
    return np.array([counts[i] / n * idf[i] for i in ids], dtype=np.float64)


@dataclass
class FeatureSet:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise DataError(f"feature matrix must be L x D with L, D >= 1, got {m.shape}")
        if not np.isfinite(m).all():
            raise NonFiniteFeatureError("feature matrix has non-finite values")
        self.matrix = m

    @property
    def L(self) -> int:
        return self.matrix.shape[0]

    @property
    def D(self) -> int:
        return self.matrix.shape[1]


def store_features(features: FeatureSet, path) -> None:
    m = np.ascontiguousarray(features.matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FVEC_HEADER.pack(FVEC_MAGIC, FVEC_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def load_features(path) -> FeatureSet:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != FVEC_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _FVEC_HEADER.size:
        raise TruncatedPayloadError(f"{path}: truncated payload (header)")
    _, version, L, D = _FVEC_HEADER.unpack_from(raw)
    if version != FVEC_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    need = L * D * 4
    body = raw[_FVEC_HEADER.size:]
    if len(body) < need:
        raise TruncatedPayloadError(f"{path}: truncated payload ({len(body)} of {need} bytes)")
    m = np.frombuffer(body[:need], dtype="<f4").reshape(L, D).astype(np.float32)
    if not np.isfinite(m).all():
        raise NonFiniteFeatureError(f"{path}: non-finite values")
    return FeatureSet(m)


def mean_pool(features: FeatureSet) -> np.ndarray:
    return np.asarray(features.matrix, dtype=np.float64).mean(axis=0)


@dataclass
class ImageRecord:
    id: str
    features: FeatureSet
    objects: list[tuple[str, float]] = field(default_factory=list)
    captions: list[CaptionRecord] = field(default_factory=list)

    def __post_init__(self):
        for label, score in self.objects:
            if not 0.0 <= score <= 1.0:
                raise DataError(f"image {self.id}: object score {score} for {label!r} outside [0, 1]")
        self.objects = sorted(self.objects, key=lambda o: (-o[1], o[0]))

    @property
    def reference_texts(self) -> list[list[str]]:
        return [tokenize(c.raw) for c in self.captions]


def read_manifest(path) -> list[dict]:
    """Raw dataset.jsonl rows, feature paths resolved against the manifest."""
    base = Path(path).parent
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                row["id"] = str(row["id"])
                row["captions"] = list(row.get("captions", []))
                row["objects"] = [(o["label"], float(o["score"])) for o in row.get("objects", [])]
                row["features"] = str(base / row["features"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from None
            rows.append(row)
    return rows


def load_dataset(path, vocab: Vocabulary, require_captions: bool = True) -> list[ImageRecord]:
    records = []
    for row in read_manifest(path):
        if require_captions and not row["captions"]:
            raise DataError(f"image {row['id']}: training records need at least one caption")
        caps = [CaptionRecord.from_text(c, vocab) for c in row["captions"]]
        records.append(ImageRecord(row["id"], load_features(row["features"]), row["objects"], caps))
    return records


def write_manifest(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

