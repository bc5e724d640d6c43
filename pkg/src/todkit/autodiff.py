"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Float64 everywhere; enough ops for small transformers and the retrieval
losses. Tensors are immutable value holders around C-contiguous numpy
arrays; a Tape records operations executed while it is active and replays
them in reverse for gradients. One tape per training step, single-threaded
per tape (distinct tapes may live on distinct threads).
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NumericsError",
    "ShapeError",
    "DegenerateVectorError",
    "TapeReuseError",
    "tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "reduce_sum",
    "concat",
    "mean_pool",
    "relu",
    "affine",
    "exp",
    "dropout",
    "layer_norm",
    "softmax",
    "logsumexp",
    "embedding",
    "l2_normalize",
    "softmax_cross_entropy",
    "cross_entropy_rows",
    "attention",
    "gradient_check",
]

_UIDS = itertools.count()
_TLS = threading.local()


class NumericsError(Exception):
    """Non-finite value or other numeric failure."""


class ShapeError(NumericsError):
    """Operand shapes incompatible with the requested operation."""


class DegenerateVectorError(NumericsError):
    """Vector with (near-)zero norm where a direction is required."""


class TapeReuseError(NumericsError):
    """Backward invoked twice on the same tape without re-recording."""


def _active_tape() -> "Tape | None":
    stack = getattr(_TLS, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable float64 array. NaN/Inf are rejected at creation."""

    __slots__ = ("data", "uid", "watched")

    def __init__(self, data, watched: bool = False):
        arr = np.asarray(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NumericsError("non-finite values in tensor")
        self.data = arr
        self.uid = next(_UIDS)
        self.watched = watched

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, uid={self.uid})"


def tensor(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def parameter(data) -> Tensor:
    """A tensor watched by every tape (trainable weight)."""
    return Tensor(data, watched=True)


class _Node:
    __slots__ = ("out_uid", "inputs", "backward")

    def __init__(self, out_uid, inputs, backward):
        self.out_uid = out_uid
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records ops while active; one backward pass per recording.

    Usage::

        with Tape() as tape:
            loss = model_loss(...)
        grads = tape.backward(loss)
        g_w = tape.grad(w)
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._derived: set[int] = set()
        self._watched: set[int] = set()
        self._used = False
        self.gradients: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_TLS, "stack", None)
        if stack is None:
            stack = _TLS.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TLS.stack.pop()

    def watch(self, t: Tensor) -> None:
        self._watched.add(t.uid)

    def tracks(self, t: Tensor) -> bool:
        return t.watched or t.uid in self._watched or t.uid in self._derived

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self._derived.add(out.uid)
        self._nodes.append(_Node(out.uid, inputs, backward))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if self._used:
            raise TapeReuseError("backward already ran on this tape")
        self._used = True
        if loss.data.ndim != 0:
            raise ShapeError("backward requires a scalar loss")
        grads: dict[int, np.ndarray] = {loss.uid: np.ones(())}
        # Nodes were appended in execution order, so the reversed scan is a
        # valid topological order and visits each node exactly once.
        for node in reversed(self._nodes):
            g_out = grads.get(node.out_uid)
            if g_out is None:
                continue
            for inp, g_in in zip(node.inputs, node.backward(g_out)):
                if g_in is None or not self.tracks(inp):
                    continue
                acc = grads.get(inp.uid)
                grads[inp.uid] = g_in if acc is None else acc + g_in
        self.gradients = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        g = self.gradients.get(t.uid)
        return np.zeros_like(t.data) if g is None else g


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape._record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product with numpy batch-dim broadcasting."""
    a, b = tensor(a), tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ _swap(b.data), a.shape)
        gb = _unbroadcast(_swap(a.data) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = tensor(a)
    shape = tuple(shape)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = tensor(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean_pool(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Average over the sequence axis of (..., T, d); optional (..., T) mask."""
    x = tensor(x)
    if mask is None:
        total = reduce_sum(x, axis=-2)
        return mul(total, np.float64(1.0 / x.shape[-2]))
    m = np.asarray(mask, dtype=np.float64)[..., None]
    counts = m.sum(axis=-2)
    if np.any(counts == 0):
        raise ShapeError("mean_pool mask with all positions masked")
    total = reduce_sum(mul(x, m), axis=-2)
    return mul(total, 1.0 / counts)


def relu(a: Tensor) -> Tensor:
    a = tensor(a)
    keep = a.data > 0
    return _result(np.where(keep, a.data, 0.0), (a,), lambda g: (np.where(keep, g, 0.0),))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with batch dims flattened so both passes are single GEMMs."""
    x, w, b = tensor(x), tensor(w), tensor(b)
    d_in, d_out = w.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"affine inner dims disagree: {x.shape} @ {w.shape}")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, d_in)
    out = flat @ w.data + b.data

    def backward(g):
        g2 = g.reshape(-1, d_out)
        return (
            (g2 @ w.data.T).reshape(x.shape),
            flat.T @ g2,
            g2.sum(axis=0),
        )

    return _result(out.reshape(*lead, d_out), (x, w, b), backward)


def exp(a: Tensor) -> Tensor:
    a = tensor(a)
    out_data = np.exp(a.data)
    return _result(out_data, (a,), lambda g: (g * out_data,))


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; mask drawn from `rng` so runs stay reproducible."""
    a = tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if p == 0.0:
        return a
    keep = rng.random(a.shape) >= p
    scale = 1.0 / (1.0 - p)
    mask = keep * scale
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = tensor(x), tensor(gain), tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        n = x.shape[-1]
        g_xhat = g * gain.data
        g_x = inv / n * (
            n * g_xhat
            - g_xhat.sum(axis=-1, keepdims=True)
            - xhat * (g_xhat * xhat).sum(axis=-1, keepdims=True)
        )
        g_gain = _unbroadcast(g * xhat, gain.shape)
        g_bias = _unbroadcast(g, bias.shape)
        return g_x, g_gain, g_bias

    return _result(xhat * gain.data + bias.data, (x, gain, bias), backward)


def _masked_max(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return x.max(axis=-1, keepdims=True)
    neg = np.where(mask, x, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ShapeError("softmax/logsumexp row with every position masked")
    return m


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax over the last axis; masked positions get probability 0."""
    x = tensor(x)
    m = _masked_max(x.data, mask)
    if mask is None:
        e = np.exp(x.data - m)
    else:
        # masked entries go to -inf pre-exp so large masked values cannot overflow
        e = np.exp(np.where(mask, x.data - m, -np.inf))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return _result(p, (x,), backward)


def logsumexp(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """log(sum(exp(x))) over the last axis with max-subtraction."""
    x = tensor(x)
    m = _masked_max(x.data, mask)
    if mask is None:
        e = np.exp(x.data - m)
    else:
        e = np.exp(np.where(mask, x.data - m, -np.inf))
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    p = e / s

    def backward(g):
        return (np.expand_dims(g, -1) * p,)

    return _result(out, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup with scatter-add gradient into the table."""
    table = tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _result(table.data[ids], (table,), backward)


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Unit-normalize along the last axis."""
    v = tensor(v)
    norm = np.linalg.norm(v.data, axis=-1, keepdims=True)
    if np.any(norm <= eps):
        raise DegenerateVectorError("cannot normalize (near-)zero vector")
    y = v.data / norm

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * inner) / norm,)

    return _result(y, (v,), backward)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-logits[target] + log sum exp(logits), for a single logit vector."""
    logits = tensor(logits)
    if logits.data.ndim != 1:
        raise ShapeError("softmax_cross_entropy expects a 1-d logit vector")
    n = logits.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} logits")
    m = logits.data.max()
    e = np.exp(logits.data - m)
    p = e / e.sum()
    out = -(logits.data[target] - m) + np.log(e.sum())

    def backward(g):
        grad = p.copy()
        grad[target] -= 1.0
        return (g * grad,)

    return _result(out, (logits,), backward)


def cross_entropy_rows(
    logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None
) -> Tensor:
    """Mean softmax cross-entropy over rows of (R, V) logits.

    `mask` (R,) selects which rows count; the mean is over selected rows.
    """
    logits = tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    r, v = logits.shape
    if targets.shape != (r,):
        raise ShapeError("targets must align with logit rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError("target id out of range")
    w = np.ones(r) if mask is None else np.asarray(mask, dtype=np.float64)
    total = w.sum()
    if total == 0:
        raise ShapeError("cross_entropy_rows with empty mask")
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    s = e.sum(axis=-1, keepdims=True)
    p = e / s
    rows = np.arange(r)
    losses = -(logits.data[rows, targets] - m[:, 0]) + np.log(s[:, 0])
    out = (losses * w).sum() / total

    def backward(g):
        grad = p.copy()
        grad[rows, targets] -= 1.0
        grad *= (g * w / total)[:, None]
        return (grad,)

    return _result(out, (logits,), backward)


def attention(
    q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None
) -> Tensor:
    """Scaled dot-product attention over (..., T, dh) heads, fused.

    `mask` broadcasts against the (..., T_q, T_k) score matrix; True = keep.
    Fused into one node: the composed matmul/softmax/matmul chain would
    materialize several score-sized intermediates per layer.
    """
    q, k, v = tensor(q), tensor(k), tensor(v)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q.data @ _swap(k.data)) * scale
    if mask is None:
        shifted = scores - scores.max(axis=-1, keepdims=True)
    else:
        scores = np.where(mask, scores, -np.inf)
        m = scores.max(axis=-1, keepdims=True)
        if not np.all(np.isfinite(m)):
            raise ShapeError("attention row with every key masked")
        shifted = scores - m
    p = np.exp(shifted)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def backward(g):
        dv = _unbroadcast(_swap(p) @ g, v.shape)
        dp = g @ _swap(v.data)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds *= scale
        dq = _unbroadcast(ds @ k.data, q.shape)
        dk = _unbroadcast(_swap(ds) @ q.data, k.shape)
        return dq, dk, dv

    return _result(out, (q, k, v), backward)


def gradient_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences."""
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("step h outside [1e-6, 1e-3]")
    with Tape() as tape:
        tape.watch(x)
        y = f(x)
    if y.data.ndim != 0:
        raise ShapeError("gradient_check needs a scalar-valued function")
    tape.backward(y)
    analytic = tape.grad(x)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        xp = Tensor((flat + bump).reshape(x.shape))
        xm = Tensor((flat - bump).reshape(x.shape))
        num = (f(xp).item() - f(xm).item()) / (2 * h)
        if not np.isfinite(num):
            raise NumericsError("non-finite value in finite-difference probe")
        a = analytic.reshape(-1)[i]
        err = abs(a - num) / (abs(a) + abs(num) + 1e-8)
        worst = max(worst, err)
    return worst
