"""Small dense-tensor engine with reverse-mode differentiation.

Operations are recorded onto the innermost active :class:`Tape` whenever one
of their inputs requires a gradient::

    with Tape() as tape:
        w = Tensor(np.eye(3), requires_grad=True)
        loss = tsum(tanh(w @ x))
    grads = backward(tape, loss)
    grads[w.node_id]

Outside a tape nothing is recorded, which is how the decoders run.

Broadcasting is limited to a matrix combined with a vector along its rows;
every other elementwise operation needs identical shapes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "GradCheckReport",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "embedding",
    "concat",
    "mean",
    "tsum",
    "dropout",
    "pick",
    "slice_",
    "transpose",
]

_ids = itertools.count()
_tapes: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""

    def __init__(self, op: str, a: tuple, b: tuple | None = None):
        if b is None:
            msg = f"{op}: unsupported shape {a}"
        else:
            msg = f"{op}: shapes {a} and {b} do not conform"
        super().__init__(msg)
        self.op = op
        self.shapes = (a, b)


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float64, copy=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: int
    inputs: tuple
    grad_fn: Callable[[np.ndarray], tuple]
    op: str


class Tape:
    """Ordered record of the primitive operations of one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], grad_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _tapes:
        _tapes[-1].nodes.append(
            _Node(out.node_id, tuple(t.node_id if t.requires_grad else None for t in inputs), grad_fn, op)
        )
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` keyed by ``node_id``.

    Every tensor that requires a gradient and feeds ``loss`` gets an entry,
    including intermediates. Contributions through fan-out are summed.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError("backward", loss.shape)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data, dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.get(node.out)
        if g is None:
            continue
        for nid, gi in zip(node.inputs, node.grad_fn(g)):
            if nid is None or gi is None:
                continue
            prev = grads.get(nid)
            grads[nid] = gi if prev is None else prev + gi
    return grads


# -- elementwise helpers -------------------------------------------------------


def _broadcast_kind(op: str, a: np.ndarray, b: np.ndarray) -> int:
    """0: same shape, 1: b is a row vector for matrix a, 2: a is the row vector."""
    if a.shape == b.shape:
        return 0
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return 1
    if a.ndim == 1 and b.ndim == 2 and b.shape[1] == a.shape[0]:
        return 2
    raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, kind: int, which: int) -> np.ndarray:
    if kind == 1 and which == 1:
        return g.sum(axis=0)
    if kind == 2 and which == 0:
        return g.sum(axis=0)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind("add", a.data, b.data)
    return _record(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, kind, 0), _unbroadcast(g, kind, 1)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind("sub", a.data, b.data)
    return _record(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, kind, 0), -_unbroadcast(g, kind, 1)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g * bd, kind, 0) if a.requires_grad else None
        gb = _unbroadcast(g * ad, kind, 1) if b.requires_grad else None
        return ga, gb

    return _record("mul", ad * bd, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _record("add_scalar", a.data + float(c), (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or ad.shape[-1] != bd.shape[0]:
        raise ShapeError("matmul", ad.shape, bd.shape)
    out = ad @ bd

    def grad_fn(g):
        ga = gb = None
        if ad.ndim == 2 and bd.ndim == 2:
            if a.requires_grad:
                ga = g @ bd.T
            if b.requires_grad:
                gb = ad.T @ g
        elif ad.ndim == 2:
            if a.requires_grad:
                ga = np.outer(g, bd)
            if b.requires_grad:
                gb = ad.T @ g
        elif bd.ndim == 2:
            if a.requires_grad:
                ga = bd @ g
            if b.requires_grad:
                gb = np.outer(ad, g)
        else:
            if a.requires_grad:
                ga = g * bd
            if b.requires_grad:
                gb = g * ad
        return ga, gb

    return _record("matmul", out, (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _record("transpose", a.data.T, (a,), lambda g: (g.T,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(np.asarray(a.data, dtype=a.data.dtype))
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def _check_softmax(op: str, x: np.ndarray):
    if x.ndim not in (1, 2) or x.shape[-1] == 0:
        raise ShapeError(op, x.shape)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis of a vector or a row-batched matrix."""
    x = a.data
    _check_softmax("softmax", x)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (a,), grad_fn)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    _check_softmax("log_softmax", x)
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", y, (a,), grad_fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup; an int gives a vector, a sequence gives a matrix."""
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, idx.shape)
    rows = table.data[idx]
    n_rows = table.shape[0]

    def grad_fn(g):
        full = np.zeros((n_rows, g.shape[-1]))
        np.add.at(full, idx, g)
        return (full,)

    return _record("embedding", rows, (table,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError("concat", datas[0].shape, datas[-1].shape) from None
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return _record("concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    x = a.data
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError("mean", x.shape)
    n = x.size if axis is None else x.shape[axis]
    out = x.mean(axis=axis)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / n,)

    return _record("mean", out, (a,), grad_fn)


def tsum(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _record("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def dropout(a: Tensor, keep: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``keep == 1``."""
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"dropout: keep probability {keep} outside (0, 1]")
    if not train or keep == 1.0:
        return a
    mask = (rng.random(a.data.shape) < keep) / keep
    return _record("dropout", a.data * mask, (a,), lambda g: (g * mask,))


def pick(a: Tensor, index) -> Tensor:
    """Single element as a 0-d tensor."""
    x = a.data
    try:
        val = x[index]
    except IndexError:
        raise ShapeError("pick", x.shape) from None
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record("pick", np.asarray(val, dtype=np.float64), (a,), grad_fn)


def slice_(a: Tensor, key) -> Tensor:
    x = a.data
    out = x[key]
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _record("slice", out, (a,), grad_fn)


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    index: tuple | None
    analytic: np.ndarray
    numeric: np.ndarray
    nonfinite: tuple | None = None

    @property
    def ok(self) -> bool:
        return self.nonfinite is None


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-5,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare the tape gradient of ``fn`` at ``point`` with central differences.

    ``fn`` must be deterministic and return a scalar tensor. Relative error
    uses ``max(|analytic|, |numeric|, floor)`` as denominator so coordinates
    where both gradients vanish do not divide by zero.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    with Tape() as tape:
        x = Tensor(x0.copy(), requires_grad=True)
        y = fn(x)
    if not np.isfinite(y.data).all():
        return GradCheckReport(np.inf, None, np.full(x0.shape, np.nan), np.full(x0.shape, np.nan), ())
    analytic = backward(tape, y).get(x.node_id, np.zeros_like(x0))

    numeric = np.zeros_like(x0)
    nonfinite = None
    for idx in np.ndindex(x0.shape):
        xp = x0.copy()
        xp[idx] += step
        fp = float(fn(Tensor(xp)).data)
        xp[idx] -= 2 * step
        fm = float(fn(Tensor(xp)).data)
        if not (np.isfinite(fp) and np.isfinite(fm)) and nonfinite is None:
            nonfinite = idx
        numeric[idx] = (fp - fm) / (2 * step)

    if not np.isfinite(analytic).all() and nonfinite is None:
        nonfinite = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
    if x0.size == 0:
        return GradCheckReport(0.0, None, analytic, numeric, nonfinite)
    err = relative_error(analytic, numeric, floor)
    worst = np.unravel_index(int(np.nanargmax(err)), x0.shape) if np.isfinite(err).any() else None
    max_err = float(np.nanmax(err)) if worst is not None else np.inf
    return GradCheckReport(max_err, worst, analytic, numeric, nonfinite)
