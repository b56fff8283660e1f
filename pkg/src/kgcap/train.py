"""Cross-entropy and self-critical training."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import END_ID, CaptionRecord, ImageRecord, Vocabulary
from .decode import DecodedSequence, ModelStepper, decode, greedy_decode, sample_search
from .knowledge import KnowledgeCorpus, TripleIndex, retrieve
from .metrics import CiderD, corpus_bleu, evaluate
from .model import (
    WA_CAPTION,
    WA_PREFIX,
    ModelConfig,
    ModelParameters,
    forward_teacher_forced,
    sequence_log_prob,
)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # model
    hidden: int = 512
    attention: int = 0
    max_vocab: int = 8000
    tied_output: bool = True
    init_scale: float = 0.08
    # cross-entropy stage
    batch_size: int = 64
    lr: float = 5e-4
    anneal_factor: float = 0.7
    anneal_every: int = 5
    dropout_keep: float = 0.5
    max_epochs: int = 30
    early_stop_patience: int = 5
    eval_every: int = 1
    # self-critical stage
    scst_lr: float = 1e-4
    scst_batch_size: int = 32
    scst_epochs: int = 20
    # shared
    lam: float = 0.2
    mode: str = "xe"
    word_attention: bool = True
    knowledge: bool = True
    knowledge_in_training: bool = True
    top_objects: int = 3
    per_object_k: int = 5
    grad_clip: float = 5.0
    beam: int = 3
    max_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.scst_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 < self.anneal_factor <= 1:
            raise ConfigError(f"anneal_factor {self.anneal_factor} outside (0, 1]")
        if not 0 < self.dropout_keep <= 1:
            raise ConfigError(f"dropout_keep {self.dropout_keep} outside (0, 1]")
        if self.lam < 0:
            raise ConfigError(f"lambda {self.lam} must be >= 0")
        if self.mode not in ("xe", "scst"):
            raise ConfigError(f"mode must be xe or scst, got {self.mode!r}")
        for name in ("batch_size", "scst_batch_size", "anneal_every", "max_len", "beam", "hidden", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("max_epochs", "scst_epochs", "early_stop_patience"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object], base: "TrainConfig | None" = None) -> "TrainConfig":
        """Typed config from string or native values layered over ``base``."""
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(cls)}
        changes = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key == "lambda":
                key = "lam"
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce(key, raw, types[key])
        return dataclasses.replace(base, **changes)


def _coerce(key: str, raw, kind):
    if not isinstance(raw, str):
        return kind(raw)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


PRESETS = {
    "paper": TrainConfig(),
    # small enough to overfit a handful of captions on one CPU core
    "desk": TrainConfig(
        hidden=64,
        max_vocab=200,
        batch_size=10,
        lr=5e-3,
        anneal_every=100,
        dropout_keep=1.0,
        max_epochs=300,
        early_stop_patience=0,
        eval_every=25,
        scst_batch_size=10,
        scst_epochs=5,
    ),
}


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def step_rng(seed: int, step: int, worker: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, worker, step]))


# -- losses and optimizer ------------------------------------------------------


def xe_loss(log_dists: Sequence[Tensor], target: CaptionRecord | Sequence[int]) -> Tensor:
    """Negative log-likelihood of ``target`` followed by ``<end>``."""
    tokens = list(target.tokens if isinstance(target, CaptionRecord) else target)
    if tokens[-1:] != [END_ID]:
        tokens = tokens + [END_ID]
    if len(log_dists) != len(tokens):
        raise ValueError(f"xe_loss: {len(log_dists)} distributions for {len(tokens)} targets")
    return ad.neg(sequence_log_prob(log_dists, tokens))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_out[name], v_out[name] = m, v
    return new_params, OptimizerState(m_out, v_out, t)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * factor
    return norm


def _apply(params: ModelParameters, grads: dict[str, np.ndarray], opt: OptimizerState, lr: float, clip: float):
    clip_global_norm(grads, clip)
    new, opt = adam_step(params.arrays(), grads, opt, lr)
    for name, arr in new.items():
        params[name].data = arr
    return opt


def collect_grads(params: ModelParameters, grads: Mapping[int, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: grads.get(t.node_id, np.zeros_like(t.data)) for name, t in params.items()}


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate for 0-based ``epoch`` under step annealing."""
    return config.lr * config.anneal_factor ** (epoch // config.anneal_every)


# -- corpora and evaluation helpers --------------------------------------------


def build_corpora(
    records: Sequence[ImageRecord], index: TripleIndex | None, config: TrainConfig
) -> dict[str, KnowledgeCorpus]:
    if index is None or not config.knowledge:
        return {}
    return {r.id: retrieve(r.objects, index, config.top_objects, config.per_object_k) for r in records}


def reference_tokens(record: ImageRecord, vocab: Vocabulary) -> list[list[str]]:
    return [vocab.decode(c.tokens) for c in record.captions]


@dataclass
class Phase:
    """What the decoder uses during one phase: knowledge strength and word attention."""

    lam: float
    word_attention: bool

    @classmethod
    def for_training(cls, config: TrainConfig) -> "Phase":
        on = config.knowledge and config.knowledge_in_training
        return cls(config.lam if on else 0.0, config.word_attention)

    @classmethod
    def for_inference(cls, config: TrainConfig) -> "Phase":
        return cls(config.lam if config.knowledge else 0.0, config.word_attention)


def greedy_scores(
    records: Sequence[ImageRecord],
    params: ModelParameters,
    vocab: Vocabulary,
    corpora: Mapping[str, KnowledgeCorpus],
    phase: Phase,
    max_len: int,
    scorer: CiderD | None = None,
) -> dict:
    refs = [reference_tokens(r, vocab) for r in records]
    hyps = [
        vocab.decode(greedy_decode(r, corpora.get(r.id), phase.lam, params, vocab, max_len, phase.word_attention).tokens)
        for r in records
    ]
    scorer = scorer or CiderD(refs)
    ciders = [scorer.score(h, rf) for h, rf in zip(hyps, refs)]
    return {
        "bleu4": corpus_bleu(hyps, refs, 4),
        "cider": float(np.mean(ciders)),
        "hypotheses": hyps,
    }


# -- cross-entropy -------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParameters
    log: list[dict]
    stopped_early: bool = False


def caption_loss(
    record: ImageRecord,
    caption: CaptionRecord,
    params: ModelParameters,
    vocab: Vocabulary,
    corpus: KnowledgeCorpus | None,
    phase: Phase,
    keep: float = 1.0,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> Tensor:
    mode = WA_CAPTION if phase.word_attention else None
    lds = forward_teacher_forced(record, caption, corpus, phase.lam, params, vocab, mode, keep, rng, train)
    return xe_loss(lds, caption)


def train_xe(
    records: Sequence[ImageRecord],
    config: TrainConfig,
    params: ModelParameters,
    vocab: Vocabulary,
    corpora: Mapping[str, KnowledgeCorpus] | None = None,
    val_records: Sequence[ImageRecord] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Mini-batch cross-entropy training with annealing and BLEU-4 early stopping.

    Validation metrics come from greedy decoding of ``val_records`` (the
    training records when none are given). Patience 0 disables early stopping.
    """
    if not records:
        raise TrainingError("empty training set")
    corpora = corpora or {}
    pairs = [(r, c) for r in records for c in r.captions]
    if not pairs:
        raise TrainingError("training set has no captions")
    train_phase, eval_phase = Phase.for_training(config), Phase.for_inference(config)
    val = list(val_records) if val_records else list(records)
    val_split = "val" if val_records else "train"
    scorer = CiderD([reference_tokens(r, vocab) for r in val])

    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    opt = OptimizerState()
    history: list[dict] = []
    best, stale, step = -1.0, 0, 0
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        lr = lr_at(config, epoch)
        perm = order_rng.permutation(len(pairs))
        losses = []
        for b, start in enumerate(range(0, len(pairs), config.batch_size)):
            batch = [pairs[i] for i in perm[start: start + config.batch_size]]
            rng = step_rng(config.seed, step)
            with ad.Tape() as tape:
                total = None
                for rec, cap in batch:
                    loss = caption_loss(
                        rec, cap, params, vocab, corpora.get(rec.id), train_phase, config.dropout_keep, rng, True
                    )
                    total = loss if total is None else ad.add(total, loss)
                total = ad.scale(total, 1.0 / len(batch))
            value = float(total.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = collect_grads(params, ad.backward(tape, total))
            opt = _apply(params, grads, opt, lr, config.grad_clip)
            losses.append(value)
            step += 1

        entry = {"epoch": epoch, "split": "train", "loss": float(np.mean(losses)), "bleu4": None, "cider": None, "lr": lr}
        evaluate_now = (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.max_epochs
        if evaluate_now:
            scores = greedy_scores(val, params, vocab, corpora, eval_phase, config.max_len, scorer)
            if val_split == "train":
                entry.update(bleu4=scores["bleu4"], cider=scores["cider"])
            else:
                val_loss = np.mean([
                    float(caption_loss(r, c, params, vocab, corpora.get(r.id), train_phase).data)
                    for r in val for c in r.captions
                ])
                history_val = {"epoch": epoch, "split": "val", "loss": float(val_loss),
                               "bleu4": scores["bleu4"], "cider": scores["cider"], "lr": lr}
        entry["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
        history.append(entry)
        if on_epoch:
            on_epoch(entry)
        if evaluate_now and val_split == "val":
            history_val["wall_ms"] = entry["wall_ms"]
            history.append(history_val)
            if on_epoch:
                on_epoch(history_val)
        log.info("xe epoch %d loss %.4f lr %.2e", epoch, entry["loss"], lr)

        if evaluate_now and config.early_stop_patience > 0:
            if scores["bleu4"] > best:
                best, stale = scores["bleu4"], 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    return TrainResult(params, history, stopped_early=True)
    return TrainResult(params, history)


# -- self-critical -------------------------------------------------------------


def sequence_gradient(
    record: ImageRecord,
    tokens: Sequence[int],
    params: ModelParameters,
    vocab: Vocabulary,
    corpus: KnowledgeCorpus | None,
    phase: Phase,
) -> tuple[float, dict[str, np.ndarray]]:
    """log p(tokens) under the decoding rules and its parameter gradient."""
    mode = WA_PREFIX if phase.word_attention else None
    words = list(tokens[:-1]) if tokens and tokens[-1] == END_ID else list(tokens)
    with ad.Tape() as tape:
        lds = forward_teacher_forced(record, words, corpus, phase.lam, params, vocab, mode, ban=True)
        lp = sequence_log_prob(lds[: len(tokens)], list(tokens))
    return float(lp.data), collect_grads(params, ad.backward(tape, lp))


@dataclass
class ScstStats:
    reward_sample: float
    reward_greedy: float
    n: int
    samples: list[list[int]] = field(default_factory=list)


def scst_step(
    batch: Sequence[ImageRecord],
    params: ModelParameters,
    vocab: Vocabulary,
    corpora: Mapping[str, KnowledgeCorpus],
    config: TrainConfig,
    scorer: CiderD,
    rng: np.random.Generator,
    train: bool = True,
) -> tuple[dict[str, np.ndarray], ScstStats]:
    """Self-critical gradient estimate averaged over ``batch``.

    One sampled rollout per image; the greedy rollout's reward is the
    baseline, so a sample equal to the greedy output contributes nothing.
    """
    phase = Phase.for_training(config)
    keep = config.dropout_keep if train else 1.0
    r_s, r_m, samples = [], [], []
    with ad.Tape() as tape:
        total = None
        for rec in batch:
            refs = reference_tokens(rec, vocab)
            if not refs:
                raise TrainingError(f"image {rec.id} has no references")
            corpus = corpora.get(rec.id)
            greedy = greedy_decode(rec, corpus, phase.lam, params, vocab, config.max_len, phase.word_attention)
            stepper = ModelStepper(rec, corpus, phase.lam, params, vocab, phase.word_attention, keep, rng, train)
            sample = sample_search(stepper, stepper.initial(), config.max_len, rng, with_grad=True)
            rs = scorer.score(vocab.decode(sample.tokens), refs)
            rm = scorer.score(vocab.decode(greedy.tokens), refs)
            r_s.append(rs)
            r_m.append(rm)
            samples.append(sample.tokens)
            advantage = rs - rm
            if advantage == 0.0:
                continue
            term = ad.scale(sample.log_prob, -advantage / len(batch))
            total = term if total is None else ad.add(total, term)
    stats = ScstStats(float(np.mean(r_s)), float(np.mean(r_m)), len(batch), samples)
    if total is None:
        return {name: np.zeros_like(t.data) for name, t in params.items()}, stats
    return collect_grads(params, ad.backward(tape, total)), stats


def train_scst(
    records: Sequence[ImageRecord],
    config: TrainConfig,
    params: ModelParameters,
    vocab: Vocabulary,
    corpora: Mapping[str, KnowledgeCorpus] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Self-critical fine-tuning at a fixed learning rate.

    Each log entry carries the mean greedy CIDEr-D on the training records
    after the epoch, plus the mean sampled and greedy rewards seen during it.
    """
    if not records:
        raise TrainingError("empty training set")
    corpora = corpora or {}
    scorer = CiderD([reference_tokens(r, vocab) for r in records])
    eval_phase = Phase.for_inference(config)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    opt = OptimizerState()
    history = []
    step = 0
    for epoch in range(config.scst_epochs):
        t0 = time.perf_counter()
        perm = order_rng.permutation(len(records))
        rs, rm, objective = [], [], []
        for b, start in enumerate(range(0, len(records), config.scst_batch_size)):
            batch = [records[i] for i in perm[start: start + config.scst_batch_size]]
            grads, stats = scst_step(batch, params, vocab, corpora, config, scorer, step_rng(config.seed, step, 1))
            if not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingError(f"non-finite gradient at epoch {epoch}, batch {b}")
            opt = _apply(params, grads, opt, config.scst_lr, config.grad_clip)
            rs.append(stats.reward_sample)
            rm.append(stats.reward_greedy)
            objective.append(stats.reward_sample - stats.reward_greedy)
            step += 1
        scores = greedy_scores(records, params, vocab, corpora, eval_phase, config.max_len, scorer)
        entry = {
            "epoch": epoch,
            "split": "train",
            "loss": -float(np.mean(objective)),
            "bleu4": scores["bleu4"],
            "cider": scores["cider"],
            "lr": config.scst_lr,
            "reward_sample": float(np.mean(rs)),
            "reward_greedy": float(np.mean(rm)),
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
        }
        history.append(entry)
        if on_epoch:
            on_epoch(entry)
        log.info("scst epoch %d greedy cider %.4f", epoch, entry["cider"])
    return TrainResult(params, history)


# -- pipelines -----------------------------------------------------------------


def init_params(config: TrainConfig, vocab_size: int, feature_dim: int) -> ModelParameters:
    model = ModelConfig(vocab_size, feature_dim, config.hidden, config.attention or None, config.tied_output)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    return ModelParameters.init(model, rng, config.init_scale)


def decode_records(
    records: Sequence[ImageRecord],
    params: ModelParameters,
    vocab: Vocabulary,
    corpora: Mapping[str, KnowledgeCorpus],
    config: TrainConfig,
) -> dict[str, DecodedSequence]:
    phase = Phase.for_inference(config)
    return {
        r.id: decode(r, corpora.get(r.id), phase.lam, params, vocab, config.beam, config.max_len, phase.word_attention)
        for r in records
    }


def score_records(
    records: Sequence[ImageRecord],
    params: ModelParameters,
    vocab: Vocabulary,
    corpora: Mapping[str, KnowledgeCorpus],
    config: TrainConfig,
) -> dict:
    """Corpus metrics of the decoded captions against each record's references."""
    decoded = decode_records(records, params, vocab, corpora, config)
    hyps = {k: vocab.decode(seq.tokens) for k, seq in decoded.items()}
    return evaluate(hyps, {r.id: reference_tokens(r, vocab) for r in records})


def train_pipeline(
    records: Sequence[ImageRecord],
    config: TrainConfig,
    vocab: Vocabulary,
    index: TripleIndex | None,
    val_records: Sequence[ImageRecord] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ModelParameters, list[dict]]:
    """Cross-entropy training followed by self-critical fine-tuning."""
    corpora = build_corpora(list(records) + list(val_records or []), index, config)
    params = init_params(config, len(vocab), records[0].features.D)
    xe = train_xe(records, config, params, vocab, corpora, val_records, on_epoch)
    rl = train_scst(records, config, xe.params, vocab, corpora, on_epoch)
    log_entries = [dict(e, stage="xe") for e in xe.log] + [dict(e, stage="scst") for e in rl.log]
    return rl.params, log_entries


def check_xe_gradients(
    params: ModelParameters,
    record: ImageRecord,
    caption: CaptionRecord,
    vocab: Vocabulary,
    corpus: KnowledgeCorpus | None = None,
    lam: float = 0.0,
    word_attention: bool = True,
    step: float = 1e-5,
) -> dict[str, ad.GradCheckReport]:
    """Finite-difference check of the teacher-forced loss for every parameter tensor."""
    phase = Phase(lam, word_attention)
    reports = {}
    for name in params:
        def fn(x, name=name):
            return caption_loss(record, caption, params.replace(name, x), vocab, corpus, phase)

        reports[name] = ad.grad_check(fn, params[name].data, step=step)
    return reports
