"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable computation in the toolkit (LSTM, margin heads, loss)
is built from the ops in this module.  Graphs are single-use: build forward,
call ``backward()`` on a scalar, read ``.grad`` off the leaves.  Gradients
accumulate (sum) into ``.grad`` until explicitly reset, which is what BPTT
and multi-term losses need.

Reductions use numpy's deterministic pairwise summation, so repeated runs
on the same machine are bit-identical.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array node in the autodiff graph.

    ``values`` is always a float numpy array.  ``grad`` is lazily allocated
    with the same shape on the first accumulation.  Integer data (token ids,
    target columns) never lives in Tensors; it is passed to ops as plain
    numpy arrays.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Same values, no gradient flow (the stop-gradient op)."""
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar; sums adjoints into every reachable
        requires_grad leaf."""
        if self.values.size != 1:
            raise ValueError(
                f"backward() requires a scalar, got shape {self.shape}"
            )
        # Iterative postorder: deep BPTT graphs overflow Python's recursion limit.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # Interior grads are scratch space for a single pass; only leaves
        # accumulate across backward calls.
        for node in topo:
            if node._backward is not None:
                node.grad = None
        self._accumulate(np.ones_like(self.values))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis=axis)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{opname}: shapes {a.shape} and {b.shape} are not broadcastable"
        ) from None


# -- arithmetic ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.values + b.values

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.values * b.values

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.values, b.shape))

    return _make(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.values / b.values

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.values, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.values / (b.values * b.values),
                                       b.shape))

    return _make(out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError(
            f"matmul: expected 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}"
        )
    out = a.values @ b.values

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.values.T)
        if b.requires_grad:
            b._accumulate(a.values.T @ g)

    return _make(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ValueError(f"transpose: expected 2-D, got {a.shape}")

    def bw(g):
        a._accumulate(g.T)

    return _make(a.values.T.copy(), (a,), bw)


# -- elementwise ----------------------------------------------------------


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.values)

    def bw(g):
        a._accumulate(g * out)

    return _make(out, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.values <= 0):
        bad = float(a.values.min())
        raise ValueError(f"log: non-positive input (min value {bad})")
    out = np.log(a.values)

    def bw(g):
        a._accumulate(g / a.values)

    return _make(out, (a,), bw)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.values < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.values)

    def bw(g):
        a._accumulate(g * 0.5 / out)

    return _make(out, (a,), bw)


def cos(a) -> Tensor:
    a = _as_tensor(a)
    out = np.cos(a.values)

    def bw(g):
        a._accumulate(-g * np.sin(a.values))

    return _make(out, (a,), bw)


def arccos(a) -> Tensor:
    """Inverse cosine.  Inputs must already be clamped strictly inside
    [-1, 1]; the gradient diverges at the endpoints."""
    a = _as_tensor(a)
    if np.any(np.abs(a.values) > 1.0):
        raise ValueError(
            "arccos: input outside [-1, 1]; clamp cosines before calling"
        )
    out = np.arccos(a.values)

    def bw(g):
        a._accumulate(-g / np.sqrt(1.0 - a.values * a.values))

    return _make(out, (a,), bw)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.values)

    def bw(g):
        a._accumulate(g * (1.0 - out * out))

    return _make(out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.values
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        a._accumulate(g * out * (1.0 - out))

    return _make(out, (a,), bw)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.values, lo, hi)

    def bw(g):
        mask = (a.values >= lo) & (a.values <= hi)
        a._accumulate(g * mask)

    return _make(out, (a,), bw)


def stop_gradient(a) -> Tensor:
    return _as_tensor(a).detach()


# -- reductions ------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy()
                          if np.ndim(g) else np.full(a.shape, g, a.dtype))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(ge, a.shape))

    return _make(out, (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.values.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def norm_l2(a, axis: int) -> Tensor:
    """Euclidean norm along ``axis`` (no keepdims)."""
    a = _as_tensor(a)
    out = np.sqrt(np.sum(a.values * a.values, axis=axis))

    def bw(g):
        ge = np.expand_dims(g, axis)
        ne = np.expand_dims(out, axis)
        a._accumulate(ge * a.values / ne)

    return _make(out, (a,), bw)


# -- shape ops --------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.values.reshape(shape)

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out, (a,), bw)


def _slice(a: Tensor, key) -> Tensor:
    out = a.values[key]

    def bw(g):
        buf = np.zeros_like(a.values)
        buf[key] = g
        a._accumulate(buf)

    return _make(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out, tuple(tensors), bw)


# -- gather / scatter --------------------------------------------------------


def rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table by integer id (embedding lookup).

    ``ids`` may have any shape; the result has shape ``ids.shape + (d,)``.
    """
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"rows: id out of range [0, {table.shape[0]}), got "
            f"min={int(ids.min())} max={int(ids.max())}"
        )
    out = table.values[ids]

    def bw(g):
        buf = np.zeros_like(table.values)
        np.add.at(buf, ids.ravel(), g.reshape(-1, table.shape[1]))
        table._accumulate(buf)

    return _make(out, (table,), bw)


def take_per_row(x: Tensor, cols: np.ndarray) -> Tensor:
    """x[i, cols[i]] for each row i of a 2-D tensor."""
    x = _as_tensor(x)
    cols = np.asarray(cols)
    rows_idx = np.arange(x.shape[0])
    out = x.values[rows_idx, cols]

    def bw(g):
        buf = np.zeros_like(x.values)
        np.add.at(buf, (rows_idx, cols), g)
        x._accumulate(buf)

    return _make(out, (x,), bw)


def add_per_row(x: Tensor, cols: np.ndarray, v: Tensor) -> Tensor:
    """Return a copy of 2-D ``x`` with ``v[i]`` added at (i, cols[i])."""
    x, v = _as_tensor(x), _as_tensor(v)
    cols = np.asarray(cols)
    rows_idx = np.arange(x.shape[0])
    out = x.values.copy()
    out[rows_idx, cols] += v.values

    def bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if v.requires_grad:
            v._accumulate(g[rows_idx, cols])

    return _make(out, (x, v), bw)


# -- loss ---------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray,
                          reduction: str = "mean") -> Tensor:
    """Numerically stable fused softmax + cross entropy.

    Forward equals the negative log softmax probability of each target id,
    computed with max-subtraction.  ``reduction`` is "mean", "sum" or "none".
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.values.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: logits must be 2-D, "
                         f"got {logits.shape}")
    n, v = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: targets shape "
                         f"{targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"softmax_cross_entropy: target id out of [0, {v})")
    if reduction not in ("mean", "sum", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")

    x = logits.values
    m = x.max(axis=1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    ridx = np.arange(n)
    losses = lse[:, 0] - x[ridx, targets]
    if reduction == "mean":
        out = losses.mean()
    elif reduction == "sum":
        out = losses.sum()
    else:
        out = losses

    def bw(g):
        p = np.exp(x - lse)
        p[ridx, targets] -= 1.0
        if reduction == "mean":
            logits._accumulate(p * (g / n))
        elif reduction == "sum":
            logits._accumulate(p * g)
        else:
            logits._accumulate(p * g[:, None])

    return _make(np.asarray(out), (logits,), bw)


# -- plain-array helpers (no graph) -------------------------------------------


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


# -- finite-difference audit ---------------------------------------------------


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
               epsilon: float = 1e-5) -> float:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps one Tensor per input array to a scalar Tensor and is called
    repeatedly on perturbed copies, so it must be a pure function of its
    arguments.  Runs in float64.  Returns the worst relative error
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)`` over every
    coordinate of every input.
    """
    base = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True) for x in base]
    out = fn(*leaves)
    if not isinstance(out, Tensor) or out.values.size != 1:
        raise ValueError("grad_check: function must return a scalar Tensor")
    out.backward()
    analytic = [np.zeros_like(b) if leaf.grad is None else leaf.grad
                for b, leaf in zip(base, leaves)]

    def eval_at(arrays):
        with no_grad():
            return float(fn(*[Tensor(a) for a in arrays]).values)

    worst = 0.0
    for k, x in enumerate(base):
        flat = x.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = eval_at(base)
            flat[i] = orig - epsilon
            lo = eval_at(base)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            a = analytic[k].ravel()[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
