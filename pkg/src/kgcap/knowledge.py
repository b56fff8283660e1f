"""Offline knowledge-graph triples and per-image knowledge corpora."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .data import Vocabulary


class KnowledgeFormatError(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


@dataclass(frozen=True)
class KnowledgeTriple:
    subject: str
    rel: str
    object: str
    weight: float

    def __post_init__(self):
        if not self.subject or not self.object:
            raise ValueError("subject and object must be nonempty")
        if not (0.0 < self.weight <= 1.0):
            raise ValueError(f"weight {self.weight} outside (0, 1]")


# subject -> [(object, rel, weight)] sorted by weight desc, then object
TripleIndex = dict[str, list[tuple[str, str, float]]]


def build_index(triples: Iterable[KnowledgeTriple]) -> TripleIndex:
    index: TripleIndex = {}
    for t in triples:
        index.setdefault(t.subject, []).append((t.object, t.rel, t.weight))
    for entries in index.values():
        entries.sort(key=lambda e: (-e[2], e[0], e[1]))
    return index


def load_triples(path) -> TripleIndex:
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise KnowledgeFormatError(path, lineno, f"malformed line ({exc.msg})") from None
            if not isinstance(row, dict):
                raise KnowledgeFormatError(path, lineno, "malformed line (not an object)")
            for key in ("subject", "rel", "object", "weight"):
                if key not in row:
                    raise KnowledgeFormatError(path, lineno, f"missing field {key!r}")
            try:
                weight = float(row["weight"])
            except (TypeError, ValueError):
                raise KnowledgeFormatError(path, lineno, f"weight {row['weight']!r} is not a number") from None
            if not (math.isfinite(weight) and 0.0 < weight <= 1.0):
                raise KnowledgeFormatError(path, lineno, f"weight {weight} outside (0, 1]")
            subject, obj = str(row["subject"]), str(row["object"])
            if not subject or not obj:
                raise KnowledgeFormatError(path, lineno, "empty subject or object")
            triples.append(KnowledgeTriple(subject, str(row["rel"]), obj, weight))
    return build_index(triples)


def write_triples(path, triples: Iterable[KnowledgeTriple]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            row = {"subject": t.subject, "rel": t.rel, "object": t.object, "weight": t.weight}
            fh.write(json.dumps(row) + "\n")


class KnowledgeCorpus(Mapping[str, float]):
    """Immutable map from entity word to correlation probability in (0, 1]."""

    def __init__(self, entries: Mapping[str, float] | None = None):
        entries = dict(entries or {})
        for token, p in entries.items():
            if not token:
                raise ValueError("empty entity token")
            if not (0.0 < p <= 1.0):
                raise ValueError(f"p_k({token!r}) = {p} outside (0, 1]")
        self._entries = dict(sorted(entries.items()))

    def __getitem__(self, token):
        return self._entries[token]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __repr__(self):
        return f"KnowledgeCorpus({self._entries!r})"

    def bias(self, vocab: Vocabulary, lam: float) -> np.ndarray | None:
        """Additive logit vector ``lam * p_k`` over the vocabulary, or None if it is all zero."""
        if lam < 0:
            raise ValueError(f"lambda must be >= 0, got {lam}")
        ids = [(vocab.token_to_id[t], p) for t, p in self._entries.items() if t in vocab.token_to_id]
        if lam == 0 or not ids:
            return None
        out = np.zeros(len(vocab))
        for i, p in ids:
            out[i] = lam * p
        return out


def retrieve(
    objects: Iterable[tuple[str, float]],
    index: TripleIndex,
    top_objects: int = 3,
    per_object_k: int = 5,
) -> KnowledgeCorpus:
    """Knowledge corpus for the ``top_objects`` highest-scoring detections.

    Each detection contributes its ``per_object_k`` strongest neighbours and
    itself (weighted by detection score). Duplicates keep the largest weight.
    """
    if top_objects < 1 or per_object_k < 1:
        raise ValueError("top_objects and per_object_k must be >= 1")
    ranked = sorted(objects, key=lambda o: (-o[1], o[0]))[:top_objects]
    entries: dict[str, float] = {}

    def put(token: str, p: float):
        if p > 0 and p > entries.get(token, 0.0):
            entries[token] = p

    for label, score in ranked:
        put(label, float(score))
        for obj, _rel, weight in index.get(label, [])[:per_object_k]:
            put(obj, weight)
    return KnowledgeCorpus(entries)


def augment_logits(logits: np.ndarray, corpus: KnowledgeCorpus, lam: float, vocab: Vocabulary) -> np.ndarray:
    """Add ``lam * p_k(w)`` to the logit of each vocabulary word in the corpus."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    logits = np.asarray(logits)
    hits = [(vocab.token_to_id[t], p) for t, p in corpus.items() if t in vocab.token_to_id]
    if lam == 0 or not hits:
        return logits
    out = logits.astype(np.float64, copy=True)
    for i, p in hits:
        out[i] += lam * p
    return out
