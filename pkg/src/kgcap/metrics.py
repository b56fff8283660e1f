"""BLEU-1..4, ROUGE-L and CIDEr-D over tokenized captions."""

from __future__ import annotations

import math
from collections import Counter
from typing import Mapping, Sequence

import numpy as np

Tokens = Sequence[str]

CIDER_SIGMA = 6.0
CIDER_MAX_N = 4
ROUGE_BETA = 1.2


class MetricError(ValueError):
    pass


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def _check(hypothesis: Tokens, references: Sequence[Tokens]) -> None:
    if not references:
        raise MetricError("empty reference set")
    if len(hypothesis) == 0:
        raise MetricError("empty hypothesis")


def _closest_ref_length(c: int, references: Sequence[Tokens]) -> int:
    return min((abs(len(r) - c), len(r)) for r in references)[1]


def _clipped_counts(hypothesis: Tokens, references: Sequence[Tokens], n: int) -> tuple[int, int]:
    hyp = ngrams(hypothesis, n)
    max_ref: Counter = Counter()
    for ref in references:
        for g, c in ngrams(ref, n).items():
            max_ref[g] = max(max_ref[g], c)
    return sum(min(c, max_ref[g]) for g, c in hyp.items()), max(len(hypothesis) - n + 1, 0)


def _combine(matches: Sequence[int], totals: Sequence[int], c: int, r: int) -> float:
    if any(m == 0 for m in matches) or any(t == 0 for t in totals):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / len(matches)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def bleu(hypothesis: Tokens, references: Sequence[Tokens], n: int = 4) -> float:
    """Sentence BLEU-n: geometric mean of clipped precisions times brevity penalty.

    No smoothing: any order without a match (or without n-grams at all) gives 0.
    """
    _check(hypothesis, references)
    if not 1 <= n <= 4:
        raise MetricError(f"BLEU order {n} outside 1..4")
    counts = [_clipped_counts(hypothesis, references, k) for k in range(1, n + 1)]
    c = len(hypothesis)
    return _combine([m for m, _ in counts], [t for _, t in counts], c, _closest_ref_length(c, references))


def corpus_bleu(hypotheses: Sequence[Tokens], references: Sequence[Sequence[Tokens]], n: int = 4) -> float:
    """Corpus BLEU-n: clipped counts and lengths summed over all images.

    Empty hypotheses are allowed and only add to the reference length.
    """
    if len(hypotheses) != len(references) or not hypotheses:
        raise MetricError("need one non-empty reference set per hypothesis")
    matches, totals = [0] * n, [0] * n
    c = r = 0
    for hyp, refs in zip(hypotheses, references):
        if not refs:
            raise MetricError("empty reference set")
        for k in range(1, n + 1):
            m, t = _clipped_counts(hyp, refs, k)
            matches[k - 1] += m
            totals[k - 1] += t
        c += len(hyp)
        r += _closest_ref_length(len(hyp), refs)
    return _combine(matches, totals, c, r)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis: Tokens, references: Sequence[Tokens], beta: float = ROUGE_BETA) -> float:
    """Best LCS F-measure over the references, recall weighted by ``beta``.

    An empty hypothesis scores 0.
    """
    if not references:
        raise MetricError("empty reference set")
    best = 0.0
    for ref in references:
        lcs = lcs_length(hypothesis, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(hypothesis), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


class CiderD:
    """CIDEr-D scorer with document frequencies frozen from a reference corpus.

    Each image's reference set counts as one document.
    """

    def __init__(self, references: Mapping[str, Sequence[Tokens]] | Sequence[Sequence[Tokens]], sigma: float = CIDER_SIGMA):
        ref_sets = list(references.values()) if isinstance(references, Mapping) else list(references)
        if not ref_sets:
            raise MetricError("empty reference corpus")
        self.sigma = sigma
        self.n_docs = len(ref_sets)
        self.doc_freq: Counter = Counter()
        for refs in ref_sets:
            if not refs:
                raise MetricError("image without references")
            seen = set()
            for ref in refs:
                for n in range(1, CIDER_MAX_N + 1):
                    seen.update(ngrams(ref, n))
            self.doc_freq.update(seen)
        self._log_n = math.log(float(self.n_docs))

    def _vector(self, tokens: Tokens) -> tuple[list[dict], list[float]]:
        vecs, norms = [], []
        for n in range(1, CIDER_MAX_N + 1):
            vec = {}
            for g, tf in ngrams(tokens, n).items():
                vec[g] = tf * (self._log_n - math.log(max(1.0, self.doc_freq[g])))
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms

    def score(self, hypothesis: Tokens, references: Sequence[Tokens]) -> float:
        if not references:
            raise MetricError("empty reference set")
        hv, hn = self._vector(hypothesis)
        total = np.zeros(CIDER_MAX_N)
        for ref in references:
            rv, rn = self._vector(ref)
            delta = len(hypothesis) - len(ref)
            penalty = math.exp(-(delta ** 2) / (2 * self.sigma ** 2))
            for k in range(CIDER_MAX_N):
                val = sum(min(w, rv[k][g]) * rv[k][g] for g, w in hv[k].items() if g in rv[k])
                if hn[k] != 0 and rn[k] != 0:
                    val /= hn[k] * rn[k]
                total[k] += val * penalty
        return float(total.mean() / len(references) * 10.0)


def cider_d(
    hypotheses: Mapping[str, Tokens], references: Mapping[str, Sequence[Tokens]]
) -> tuple[dict[str, float], float]:
    """Per-image CIDEr-D and its mean, with IDF taken from ``references``."""
    scorer = CiderD(references)
    per_image = {k: scorer.score(hypotheses[k], references[k]) for k in hypotheses}
    return per_image, float(np.mean(list(per_image.values()))) if per_image else 0.0


def evaluate(hypotheses: Mapping[str, Tokens], references: Mapping[str, Sequence[Tokens]]) -> dict:
    """Corpus metrics in the ``evaluate`` output layout."""
    ids = sorted(hypotheses)
    missing = [i for i in ids if i not in references]
    if missing:
        raise MetricError(f"no references for images {missing[:5]}")
    hyps = [hypotheses[i] for i in ids]
    refs = [references[i] for i in ids]
    out = {f"bleu{n}": corpus_bleu(hyps, refs, n) for n in range(1, 5)}
    out["rouge_l"] = float(np.mean([rouge_l(h, r) for h, r in zip(hyps, refs)]))
    out["cider_d"] = cider_d(dict(zip(ids, hyps)), dict(zip(ids, refs)))[1]
    out["n_images"] = len(ids)
    return out
