"""A small reverse-mode automatic differentiation engine over float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the output gradient to parent gradients. ``backward`` walks
that DAG once in reverse topological order, summing contributions where a
tensor fans out.

Broadcasting is limited to scalars, row vectors (``(d,)`` or ``(1, d)``
against ``(n, d)``) and column vectors (``(n, 1)`` against ``(n, d)``).
"""

from __future__ import annotations

import contextlib
import json
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording parents (inference only)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        v = np.array(value, dtype=np.float64) if not isinstance(value, np.ndarray) else value
        if v.dtype != np.float64:
            v = v.astype(np.float64)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite values produced by {op}")
        self.value = v
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(v) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self._consumed = False

    # -- basics ------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return gather_rows(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- backward ----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if self.value.size != 1:
            raise ValueError("backward needs a scalar loss")
        if self._consumed:
            raise RuntimeError("backward already ran through this graph")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node._consumed = True
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self._consumed = True


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        if state.get(key) == 1:
            raise RuntimeError("cycle detected in tape")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            if state.get(id(p)) == 1:
                raise RuntimeError("cycle detected in tape")
            if state.get(id(p)) != 2 and p.requires_grad:
                stack.append((p, False))
    return order


def tape_ops(root: Tensor) -> list[dict]:
    """JSON-friendly op list of the graph below ``root`` in execution order."""
    order = _topological_order(root)
    ids = {id(t): k for k, t in enumerate(order)}
    return [
        {"id": ids[id(t)], "op": t.op, "shape": list(t.shape),
         "parents": [ids[id(p)] for p in t._parents if id(p) in ids]}
        for t in order
    ]


def dump_tape(root: Tensor) -> str:
    return json.dumps(tape_ops(root))


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _make(value, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if track:
        return Tensor(value, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(value, op=op)


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or a == () or b == ():
        return
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if len(big) == 2:
        n, d = big
        if small in ((d,), (1, d), (n, 1), (1, 1)):
            return
    raise ValueError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError("transpose needs a 2-D tensor")
    return _make(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    av = a.value
    if np.any(av <= 0):
        raise ValueError("log of non-positive input")
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def sqrt(a: Tensor) -> Tensor:
    av = a.value
    if np.any(av <= 0):
        raise ValueError("sqrt of non-positive input")
    out = np.sqrt(av)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def reciprocal(a: Tensor) -> Tensor:
    av = a.value
    if np.any(av == 0):
        raise ValueError("reciprocal of zero")
    out = 1.0 / av
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.value
    inside = (x > lo) & (x < hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.value.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def _scatter_add(x: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """``out[idx[r]] += x[r]`` for every row ``r``, as a sparse product."""
    ones = np.ones(idx.shape[0])
    ind = sp.csr_matrix((ones, (idx, np.arange(idx.shape[0]))), shape=(n, idx.shape[0]))
    flat = x.reshape(x.shape[0], -1)
    return np.asarray(ind @ flat).reshape((n,) + x.shape[1:])


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def back(g):
        return (_scatter_add(g, idx, shape[0]),)

    return _make(a.value[idx], (a,), back, "gather_rows")


def _segment_reduce_sum(x: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    return _scatter_add(x, seg, n)


def _segment_max(x: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    order = np.argsort(seg, kind="stable")
    sorted_seg = seg[order]
    starts = np.flatnonzero(np.r_[True, sorted_seg[1:] != sorted_seg[:-1]])
    out = np.full((n,) + x.shape[1:], -np.inf)
    out[sorted_seg[starts]] = np.maximum.reduceat(x[order], starts, axis=0)
    return out


def segment_sum(a: Tensor, segments, n_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` buckets given by ``segments``."""
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape[0] != a.shape[0]:
        raise ValueError("segment_sum: one segment id per row")
    return _make(_segment_reduce_sum(a.value, seg, n_segments), (a,), lambda g: (g[seg],), "segment_sum")


def segment_softmax(a: Tensor, segments, n_segments: int) -> Tensor:
    """Softmax over rows sharing a segment id, independently per column."""
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape[0] != a.shape[0]:
        raise ValueError("segment_softmax: one segment id per row")
    x = a.value
    mx = _segment_max(x, seg, n_segments)
    ex = np.exp(x - mx[seg])
    denom = _segment_reduce_sum(ex, seg, n_segments)
    out = ex / denom[seg]

    def back(g):
        dot = _segment_reduce_sum(g * out, seg, n_segments)
        return (out * (g - dot[seg]),)

    return _make(out, (a,), back, "segment_softmax")


def l2_normalize_rows(a: Tensor) -> Tensor:
    x = a.value
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2_normalize_rows: zero-norm row")
    out = x / norm

    def back(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norm,)

    return _make(out, (a,), back, "l2_normalize_rows")


# ---------------------------------------------------------------------------
# composites


def mish(a: Tensor) -> Tensor:
    """x * tanh(softplus(x))."""
    return a * tanh(softplus(a))


def logsumexp_rows(a: Tensor) -> Tensor:
    shift = a.value.max(axis=1, keepdims=True)
    return log(exp(a - shift).sum(axis=1, keepdims=True)) + shift


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5, floor: float = 1e-4) -> float:
    """Largest relative disagreement between tape and central-difference gradients.

    Each coordinate's error is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps coordinates with near-zero gradients on an absolute scale.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.value)
    out = f(*inputs)
    if out.value.size != 1:
        raise ValueError("gradcheck needs a scalar function")
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad.copy()
        flat = t.value.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            hi, lo = orig + eps, orig - eps
            flat[k] = hi
            with no_grad():
                up = f(*inputs).item()
            flat[k] = lo
            with no_grad():
                down = f(*inputs).item()
            flat[k] = orig
            # divide by the step actually taken, not the nominal 2*eps
            numeric = (up - down) / (hi - lo)
            a = analytic.reshape(-1)[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
