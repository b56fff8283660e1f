"""Attention LSTM caption decoder with word attention and knowledge-biased logits.

Per time step ``t``::

    H_t   = s ⊙ h_{t-1}                      (s: TF-IDF weighted word context)
    e_i   = W_e · tanh(W_v v_i + W_h H_t)
    α     = softmax(e),  c_t = Σ α_i v_i
    [i f o g] = W_x x_t + U_c c_t + Z_h h_{t-1} + b
    m_t = σ(f) ⊙ m_{t-1} + σ(i) ⊙ tanh(g),  h_t = σ(o) ⊙ tanh(m_t)
    logits = E M_g h_t  (+ λ p_k on knowledge words)

The four gate blocks are stacked in ``W_x``, ``U_c``, ``Z_h`` and ``b`` in
the order input, forget, output, candidate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PAD_ID, START_ID, UNK_ID, CaptionRecord, FeatureSet, ImageRecord, Vocabulary, tfidf_weights
from .knowledge import KnowledgeCorpus

CKPT_MAGIC = b"CAPT"
CKPT_VERSION = 1

BANNED_IDS = (START_ID, UNK_ID, PAD_ID)

# word-context modes
WA_CAPTION = "caption"  # fixed context from the ground-truth caption
WA_PREFIX = "prefix"  # recomputed from the tokens emitted so far


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feature_dim: int
    hidden: int = 64
    attention: int | None = None
    tied_output: bool = True

    @property
    def att_dim(self) -> int:
        return self.attention or self.hidden

    def shapes(self) -> dict[str, tuple]:
        d, D, A, V = self.hidden, self.feature_dim, self.att_dim, self.vocab_size
        return {
            "E": (V, d),
            "W_e": (A,),
            "W_v": (A, D),
            "W_h": (A, d),
            "W_x": (4 * d, d),
            "U_c": (4 * d, D),
            "Z_h": (4 * d, d),
            "b": (4 * d,),
            "M_g": (d, d) if self.tied_output else (V, d),
            "P_h": (d, D),
            "P_m": (d, D),
        }


class ModelParameters:
    """Named parameter tensors of the decoder."""

    def __init__(self, tensors: dict[str, Tensor], config: ModelConfig | None = None):
        self.tensors = {k: (v if isinstance(v, Tensor) else Tensor(v, requires_grad=True)) for k, v in tensors.items()}
        for t in self.tensors.values():
            t.requires_grad = True
        self.config = config or self._infer_config()
        expected = self.config.shapes()
        if set(expected) != set(self.tensors):
            raise CheckpointError(f"parameter names {sorted(self.tensors)} != {sorted(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise CheckpointError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def _infer_config(self) -> ModelConfig:
        try:
            V, d = self.tensors["E"].shape
            A, D = self.tensors["W_v"].shape
            # ambiguous when |V| == d; read as tied
            tied = self.tensors["M_g"].shape == (d, d)
        except KeyError as exc:
            raise CheckpointError(f"missing parameter {exc}") from None
        return ModelConfig(V, D, d, A, tied)

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, scale: float = 0.08) -> "ModelParameters":
        if config.hidden < 1 or config.feature_dim < 1 or config.vocab_size < 5:
            raise ValueError(f"invalid model config {config}")
        tensors = {}
        for name, shape in config.shapes().items():
            tensors[name] = rng.uniform(-scale, scale, size=shape)
        d = config.hidden
        tensors["b"][:] = 0.0
        tensors["b"][d:2 * d] = 1.0
        return cls({k: Tensor(v, requires_grad=True) for k, v in tensors.items()}, config)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self) -> "ModelParameters":
        return ModelParameters({k: Tensor(v.data.copy(), True) for k, v in self.tensors.items()}, self.config)

    def replace(self, name: str, tensor: Tensor) -> "ModelParameters":
        tensors = dict(self.tensors)
        tensors[name] = tensor
        out = ModelParameters.__new__(ModelParameters)
        out.tensors = tensors
        out.config = self.config
        return out

    @property
    def hidden(self) -> int:
        return self.config.hidden


@dataclass
class DecoderState:
    h: Tensor
    m: Tensor
    t: int = 0


# -- building blocks -----------------------------------------------------------


def word_attention(tokens: Sequence[int], delta: np.ndarray, params: ModelParameters) -> tuple[Tensor, np.ndarray]:
    """Word context ``s = Σ softmax(δ)_i E[w_i]`` and the weights used."""
    if len(delta) != len(tokens):
        raise ValueError(f"word_attention: {len(delta)} weights for {len(tokens)} tokens")
    beta = ad.softmax(Tensor(delta)).data
    s = ad.matmul(Tensor(beta), ad.embedding(params["E"], list(tokens)))
    return s, beta


def word_context(tokens: Sequence[int], vocab: Vocabulary, params: ModelParameters) -> Tensor:
    """TF-IDF word context for ``tokens``; all ones (the fusion identity) if empty."""
    if len(tokens) == 0:
        return Tensor(np.ones(params.hidden))
    s, _ = word_attention(tokens, tfidf_weights(tokens, vocab), params)
    return s


def fuse(s: Tensor, h_prev: Tensor) -> Tensor:
    if s.shape != h_prev.shape:
        raise ad.ShapeError("fuse", s.shape, h_prev.shape)
    return ad.mul(s, h_prev)


def project_regions(V: Tensor, params: ModelParameters) -> Tensor:
    """``W_v v_i`` for every region, as an L x A matrix."""
    return ad.matmul(V, ad.transpose(params["W_v"]))


def visual_attention(
    V: Tensor, H: Tensor, params: ModelParameters, projected: Tensor | None = None
) -> tuple[Tensor, Tensor]:
    if V.ndim != 2 or V.shape[1] != params["W_v"].shape[1]:
        raise ad.ShapeError("visual_attention", V.shape, params["W_v"].shape)
    if projected is None:
        projected = project_regions(V, params)
    e = ad.matmul(ad.tanh(ad.add(projected, ad.matmul(params["W_h"], H))), params["W_e"])
    alpha = ad.softmax(e)
    return alpha, ad.matmul(alpha, V)


def lstm_step(
    x: Tensor,
    c: Tensor,
    state: DecoderState,
    params: ModelParameters,
    keep: float = 1.0,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> DecoderState:
    d = params.hidden
    if x.shape != (d,) or state.h.shape != (d,) or c.shape != (params["U_c"].shape[1],):
        raise ad.ShapeError("lstm_step", x.shape, c.shape)
    z = ad.add(
        ad.add(ad.add(ad.matmul(params["W_x"], x), ad.matmul(params["U_c"], c)), ad.matmul(params["Z_h"], state.h)),
        params["b"],
    )
    gates = ad.sigmoid(z[: 3 * d])
    i, f, o = gates[:d], gates[d: 2 * d], gates[2 * d:]
    g = ad.tanh(z[3 * d:])
    m = ad.add(ad.mul(f, state.m), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(m))
    h = ad.dropout(h, keep, rng, train)
    return DecoderState(h, m, state.t + 1)


def output_logits(h: Tensor, params: ModelParameters) -> Tensor:
    if params.config.tied_output:
        return ad.matmul(params["E"], ad.matmul(params["M_g"], h))
    return ad.matmul(params["M_g"], h)


def init_state(vbar, params: ModelParameters) -> DecoderState:
    vbar = vbar if isinstance(vbar, Tensor) else Tensor(vbar)
    return DecoderState(ad.tanh(ad.matmul(params["P_h"], vbar)), ad.tanh(ad.matmul(params["P_m"], vbar)), 0)


# -- per-image context and full steps -----------------------------------------


def ban_vector(vocab_size: int) -> np.ndarray:
    out = np.zeros(vocab_size)
    out[list(BANNED_IDS)] = -np.inf
    return out


class ImageContext:
    """Everything about one image that stays fixed while decoding it."""

    def __init__(
        self,
        features: FeatureSet,
        params: ModelParameters,
        corpus: KnowledgeCorpus | None = None,
        lam: float = 0.0,
        vocab: Vocabulary | None = None,
        ban: bool = False,
    ):
        self.V = Tensor(np.asarray(features.matrix, dtype=np.float64))
        self.vbar = Tensor(self.V.data.mean(axis=0))
        self.projected = project_regions(self.V, params)
        bias = corpus.bias(vocab, lam) if corpus is not None and vocab is not None else None
        if ban:
            banned = ban_vector(params.config.vocab_size)
            bias = banned if bias is None else bias + banned
        self.bias = None if bias is None else Tensor(bias)


def decoder_step(
    ctx: ImageContext,
    token: int,
    state: DecoderState,
    s: Tensor | None,
    params: ModelParameters,
    keep: float = 1.0,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> tuple[Tensor, DecoderState, np.ndarray]:
    """One decoding step; returns log-probabilities, the new state and α."""
    H = state.h if s is None else fuse(s, state.h)
    alpha, c = visual_attention(ctx.V, H, params, ctx.projected)
    x = ad.embedding(params["E"], int(token))
    new = lstm_step(x, c, state, params, keep, rng, train)
    logits = output_logits(new.h, params)
    if ctx.bias is not None:
        logits = ad.add(logits, ctx.bias)
    return ad.log_softmax(logits), new, alpha.data


def forward_teacher_forced(
    image: ImageRecord | FeatureSet,
    caption: CaptionRecord | Sequence[int],
    corpus: KnowledgeCorpus | None,
    lam: float,
    params: ModelParameters,
    vocab: Vocabulary,
    word_attention_mode: str | None = WA_CAPTION,
    keep: float = 1.0,
    rng: np.random.Generator | None = None,
    train: bool = False,
    ban: bool = False,
    max_len: int | None = None,
) -> list[Tensor]:
    """Log-distributions predicting ``w_1 .. w_N`` and then ``<end>``.

    ``word_attention_mode`` is ``"caption"`` (context from the whole target,
    as in training), ``"prefix"`` (context from the tokens fed so far, as in
    decoding) or None (word attention off).
    """
    tokens = list(caption.tokens if isinstance(caption, CaptionRecord) else caption)
    if max_len is not None and len(tokens) > max_len:
        raise ValueError(f"caption length {len(tokens)} exceeds max length {max_len}")
    features = image.features if isinstance(image, ImageRecord) else image
    ctx = ImageContext(features, params, corpus, lam, vocab, ban)
    state = init_state(ctx.vbar, params)

    s = None
    if word_attention_mode == WA_CAPTION:
        s = word_context(tokens, vocab, params)
    elif word_attention_mode not in (None, WA_PREFIX):
        raise ValueError(f"unknown word attention mode {word_attention_mode!r}")

    inputs = [START_ID] + tokens
    out = []
    for t, tok in enumerate(inputs):
        if word_attention_mode == WA_PREFIX:
            s = word_context(tokens[:t], vocab, params)
        logp, state, _ = decoder_step(ctx, tok, state, s, params, keep, rng, train)
        out.append(logp)
    return out


def sequence_log_prob(log_dists: Sequence[Tensor], targets: Sequence[int]) -> Tensor:
    total = ad.pick(log_dists[0], targets[0])
    for ld, tgt in zip(log_dists[1:], targets[1:]):
        total = ad.add(total, ad.pick(ld, tgt))
    return total


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(params: ModelParameters, path) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params.tensors))]
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> ModelParameters:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        name = raw[pos: pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) * 4
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(raw, dtype="<f4", count=int(np.prod(dims)), offset=pos).reshape(dims)
        pos += size
        tensors[name] = Tensor(arr.astype(np.float64), requires_grad=True)
    return ModelParameters(tensors)
