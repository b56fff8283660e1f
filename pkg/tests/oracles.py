"""Brute-force reference implementations used only by the tests.

Written from the textbook definitions with plain loops, deliberately
sharing no code with the package.
"""

from __future__ import annotations

import math
from functools import lru_cache


def _grams(words, n):
    return [" ".join(words[i:i + n]) for i in range(len(words) - n + 1)]


def _count(items, x):
    return sum(1 for y in items if y == x)


def _closest_length(c, refs):
    best = None
    for r in refs:
        key = (abs(len(r) - c), len(r))
        if best is None or key < best:
            best = key
    return best[1]


def bleu_oracle(hyp, refs, n):
    matched, total = [], []
    for k in range(1, n + 1):
        hg = _grams(hyp, k)
        m = 0
        for g in set(hg):
            m += min(_count(hg, g), max(_count(_grams(r, k), g) for r in refs))
        matched.append(m)
        total.append(len(hg))
    return _bleu_from_counts(matched, total, len(hyp), _closest_length(len(hyp), refs))


def corpus_bleu_oracle(hyps, refss, n):
    matched, total = [0] * n, [0] * n
    c = r = 0
    for hyp, refs in zip(hyps, refss):
        for k in range(1, n + 1):
            hg = _grams(hyp, k)
            for g in set(hg):
                matched[k - 1] += min(_count(hg, g), max(_count(_grams(rf, k), g) for rf in refs))
            total[k - 1] += len(hg)
        c += len(hyp)
        r += _closest_length(len(hyp), refs)
    return _bleu_from_counts(matched, total, c, r)


def _bleu_from_counts(matched, total, c, r):
    if min(total) == 0 or min(matched) == 0:
        return 0.0
    prod = 1.0
    for m, t in zip(matched, total):
        prod *= m / t
    bp = 1.0 if c >= r else math.exp(1 - r / c)
    return bp * prod ** (1.0 / len(matched))


def lcs_oracle(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def rouge_l_oracle(hyp, refs, beta=1.2):
    scores = [0.0]
    for ref in refs:
        lcs = lcs_oracle(hyp, ref)
        if lcs:
            p, r = lcs / len(hyp), lcs / len(ref)
            scores.append(((1 + beta * beta) * p * r) / (r + beta * beta * p))
    return max(scores)


def cider_d_oracle(hyp, refs, all_refs, sigma=6.0):
    """CIDEr-D of one hypothesis; document frequencies over ``all_refs`` (one document per image)."""
    n_docs = len(all_refs)

    def df(gram, k):
        return sum(1 for image_refs in all_refs if any(gram in _grams(r, k) for r in image_refs))

    def vec(words, k):
        gs = _grams(words, k)
        return {g: _count(gs, g) * (math.log(n_docs) - math.log(max(1.0, df(g, k)))) for g in set(gs)}

    total = 0.0
    for k in range(1, 5):
        hv = vec(hyp, k)
        hn = math.sqrt(sum(x * x for x in hv.values()))
        for ref in refs:
            rv = vec(ref, k)
            rn = math.sqrt(sum(x * x for x in rv.values()))
            dot = 0.0
            for g in hv:
                if g in rv:
                    dot += min(hv[g], rv[g]) * rv[g]
            sim = dot / (hn * rn) if hn > 0 and rn > 0 else dot
            total += sim * math.exp(-((len(hyp) - len(ref)) ** 2) / (2 * sigma * sigma))
    return 10.0 * total / (4 * len(refs))


def tfidf_oracle(sentence, captions):
    """δ per position from raw token lists: tf/N times smoothed idf over caption documents."""
    n_docs = len(captions)
    out = []
    for w in sentence:
        tf = sentence.count(w) / len(sentence)
        docs = sum(1 for cap in captions if w in cap)
        out.append(tf * (math.log((1 + n_docs) / (1 + docs)) + 1))
    return out


def adam_oracle(p, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar Adam over a list of gradients."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        p -= lr * (m / (1 - beta1 ** t)) / (math.sqrt(v / (1 - beta2 ** t)) + eps)
    return p
