"""Greedy, sampled and beam-search caption generation.

The search routines only need a step function ``step(state, token) ->
(log_probs, new_state, info)``; :class:`ModelStepper` adapts the caption
model to that interface, and tests drive the same routines with hand-built
probability tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import END_ID, START_ID, FeatureSet, ImageRecord, Vocabulary
from .knowledge import KnowledgeCorpus
from .model import ImageContext, ModelParameters, decoder_step, init_state, word_context

StepFn = Callable[[Any, int], tuple[Any, Any, Any]]


@dataclass
class DecodedSequence:
    tokens: list[int]
    score: float
    alphas: list[np.ndarray] = field(default_factory=list)
    log_prob: Tensor | None = None

    @property
    def words(self) -> list[int]:
        """Tokens without the trailing ``<end>``."""
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == END_ID else list(self.tokens)


def _values(logp) -> np.ndarray:
    return logp.data if isinstance(logp, Tensor) else np.asarray(logp)


class ModelStepper:
    """Step function over the caption model for a single image.

    The state is ``(DecoderState, emitted tokens)``; the word context is
    rebuilt from the emitted tokens at every step when word attention is on.
    """

    def __init__(
        self,
        image: ImageRecord | FeatureSet,
        corpus: KnowledgeCorpus | None,
        lam: float,
        params: ModelParameters,
        vocab: Vocabulary,
        word_attention: bool = True,
        keep: float = 1.0,
        rng: np.random.Generator | None = None,
        train: bool = False,
    ):
        features = image.features if isinstance(image, ImageRecord) else image
        self.ctx = ImageContext(features, params, corpus, lam, vocab, ban=True)
        self.params = params
        self.vocab = vocab
        self.word_attention = word_attention
        self.keep, self.rng, self.train = keep, rng, train

    def initial(self):
        return (init_state(self.ctx.vbar, self.params), ())

    def __call__(self, state, token: int):
        dec, emitted = state
        if token != START_ID:
            emitted = emitted + (int(token),)
        s = word_context(emitted, self.vocab, self.params) if self.word_attention else None
        logp, new, alpha = decoder_step(self.ctx, token, dec, s, self.params, self.keep, self.rng, self.train)
        return logp, (new, emitted), alpha


def greedy_search(step: StepFn, init, max_len: int, end_id: int = END_ID) -> DecodedSequence:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    state, token = init, START_ID
    out = DecodedSequence([], 0.0)
    for _ in range(max_len):
        logp, state, info = step(state, token)
        lp = _values(logp)
        token = int(np.argmax(lp))
        out.tokens.append(token)
        out.score += float(lp[token])
        if info is not None:
            out.alphas.append(info)
        if token == end_id:
            break
    return out


def sample_search(
    step: StepFn, init, max_len: int, rng: np.random.Generator, end_id: int = END_ID, with_grad: bool = False
) -> DecodedSequence:
    """Draw one sequence from the step distributions.

    With ``with_grad`` the log-probability of the drawn sequence is also
    returned as a tensor recorded on the active tape.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    state, token = init, START_ID
    out = DecodedSequence([], 0.0)
    for _ in range(max_len):
        logp, state, info = step(state, token)
        lp = _values(logp)
        cdf = np.cumsum(np.exp(lp))
        token = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        token = min(token, len(lp) - 1)
        while not np.isfinite(lp[token]):  # guard against landing on a zero-mass entry
            token -= 1
        out.tokens.append(token)
        out.score += float(lp[token])
        if with_grad:
            picked = ad.pick(logp, token)
            out.log_prob = picked if out.log_prob is None else ad.add(out.log_prob, picked)
        if info is not None:
            out.alphas.append(info)
        if token == end_id:
            break
    return out


@dataclass
class _Hyp:
    tokens: tuple
    score: float
    state: Any
    alphas: tuple = ()


def beam_search_core(step: StepFn, init, beam: int, max_len: int, end_id: int = END_ID) -> DecodedSequence:
    """Length-synchronous beam search over cumulative log-probability.

    Candidates that emit ``end_id`` inside the top ``beam`` are set aside as
    finished; hypotheses still open at ``max_len`` count as finished too. The
    highest score wins, ties going to the shorter and then the
    lexicographically smaller sequence.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    alive = [_Hyp((), 0.0, init)]
    finished: list[_Hyp] = []
    for _ in range(max_len):
        cands = []
        for hyp in alive:
            prev = hyp.tokens[-1] if hyp.tokens else START_ID
            logp, state, info = step(hyp.state, prev)
            lp = _values(logp)
            alphas = hyp.alphas + ((info,) if info is not None else ())
            for tok in np.flatnonzero(np.isfinite(lp)):
                cands.append((hyp.score + float(lp[tok]), hyp.tokens + (int(tok),), state, alphas))
        cands.sort(key=lambda c: (-c[0], c[1]))
        alive = []
        for score, tokens, state, alphas in cands[:beam]:
            hyp = _Hyp(tokens, score, state, alphas)
            (finished if tokens[-1] == end_id else alive).append(hyp)
        if not alive:
            break
        # scores never increase, so nothing open can overtake the best finished one
        if finished and max(f.score for f in finished) >= alive[0].score:
            break
    best = min(finished + alive, key=lambda h: (-h.score, len(h.tokens), h.tokens))
    return DecodedSequence(list(best.tokens), best.score, list(best.alphas))


def enumerate_sequences(step: StepFn, init, max_len: int, end_id: int = END_ID) -> list[tuple[tuple, float]]:
    """Every complete sequence with its log-probability (exhaustive; tiny models only)."""
    out = []

    def walk(state, prev, tokens, score):
        logp, new_state, _ = step(state, prev)
        lp = _values(logp)
        for tok in np.flatnonzero(np.isfinite(lp)):
            seq, sc = tokens + (int(tok),), score + float(lp[tok])
            if tok == end_id or len(seq) == max_len:
                out.append((seq, sc))
            else:
                walk(new_state, int(tok), seq, sc)

    walk(init, START_ID, (), 0.0)
    return out


# -- model-level entry points --------------------------------------------------


def greedy_decode(
    image, corpus, lam: float, params: ModelParameters, vocab: Vocabulary, max_len: int = 16, word_attention: bool = True
) -> DecodedSequence:
    stepper = ModelStepper(image, corpus, lam, params, vocab, word_attention)
    return greedy_search(stepper, stepper.initial(), max_len)


def sample_decode(
    image,
    corpus,
    lam: float,
    params: ModelParameters,
    vocab: Vocabulary,
    max_len: int,
    rng: np.random.Generator,
    word_attention: bool = True,
    with_grad: bool = False,
    keep: float = 1.0,
    train: bool = False,
) -> DecodedSequence:
    stepper = ModelStepper(image, corpus, lam, params, vocab, word_attention, keep, rng, train)
    return sample_search(stepper, stepper.initial(), max_len, rng, with_grad=with_grad)


def beam_search(
    image,
    corpus,
    lam: float,
    params: ModelParameters,
    vocab: Vocabulary,
    beam: int = 3,
    max_len: int = 16,
    word_attention: bool = True,
) -> DecodedSequence:
    stepper = ModelStepper(image, corpus, lam, params, vocab, word_attention)
    return beam_search_core(stepper, stepper.initial(), beam, max_len)


def decode(
    image, corpus, lam, params, vocab, beam: int = 1, max_len: int = 16, word_attention: bool = True
) -> DecodedSequence:
    if beam == 1:
        return greedy_decode(image, corpus, lam, params, vocab, max_len, word_attention)
    return beam_search(image, corpus, lam, params, vocab, beam, max_len, word_attention)


def table_stepper(rows: dict[tuple, Sequence[float]]) -> tuple[StepFn, tuple]:
    """Step function over explicit next-token probabilities keyed by prefix."""

    def step(prefix, token):
        prefix = prefix if token == START_ID else prefix + (token,)
        with np.errstate(divide="ignore"):
            return np.log(np.asarray(rows[prefix], dtype=np.float64)), prefix, None

    return step, ()
