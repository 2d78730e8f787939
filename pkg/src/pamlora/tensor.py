"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Tensors are immutable wrappers around read-only numpy arrays. Operations
executed while a :class:`ComputationRecord` is active are appended to it
when at least one operand is tracked (a watched parameter or the result of
an earlier recorded op). :func:`grad` walks the record backwards.

    with ComputationRecord() as rec:
        w = rec.watch(Tensor([3.0]))
        loss = tsum(w * w)
    grad(loss, rec)[w.id]   # Tensor([6.])
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_ids = itertools.count(1)
_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "records"):
        _local.records = []
    return _local.records


class Tensor:
    __slots__ = ("data", "id")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # skips the defensive copy for arrays produced internally
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.id = next(_ids)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor({self.data!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Node:
    op: str
    operands: tuple
    result: int
    backward: Callable = field(repr=False)


class ComputationRecord:
    """Ordered log of recorded primitive ops plus the set of trainable ids."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.trainable: dict[int, Tensor] = {}
        self._tracked: set[int] = set()

    def watch(self, t: Tensor) -> Tensor:
        self.trainable[t.id] = t
        self._tracked.add(t.id)
        return t

    def is_tracked(self, t: Tensor) -> bool:
        return t.id in self._tracked

    def contains(self, t: Tensor) -> bool:
        return t.id in self._tracked

    def _append(self, op, operands, result, backward):
        self.nodes.append(Node(op, tuple(o.id for o in operands), result.id, backward))
        self._tracked.add(result.id)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


def active_record() -> ComputationRecord | None:
    s = _stack()
    return s[-1] if s else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, operands, out, backward):
    rec = active_record()
    if rec is None:
        return out
    if any(rec.is_tracked(o) for o in operands):
        rec._append(op, operands, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# primitives ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data
    out = Tensor._wrap(A @ B)
    return _record("matmul", (a, b), out, lambda g: (g @ B.T, A.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got {a.shape}")
    out = Tensor._wrap(a.data.T)
    return _record("transpose", (a,), out, lambda g: (g.T,))


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    out = Tensor._wrap(a.data + b.data)
    return _record("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    out = Tensor._wrap(a.data - b.data)
    return _record("sub", (a, b), out, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    A, B = a.data, b.data
    out = Tensor._wrap(A * B)
    return _record(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor._wrap(a.data * c)
    return _record("scale", (a,), out, lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient at exactly 0 is 0
    out = Tensor._wrap(np.maximum(a.data, 0.0))  # keeps NaN visible
    return _record("relu", (a,), out, lambda g: (g * mask,))


def tsum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = Tensor._wrap(np.sum(a.data))
    return _record("sum", (a,), out, lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    out = Tensor._wrap(np.sum(a.data) / n)
    return _record("mean", (a,), out, lambda g: (np.full(shape, float(g) / n),))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax of a 2-d tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"log_softmax needs a 2-d tensor, got {a.shape}")
    ls = _log_softmax(a.data)
    sm = np.exp(ls)
    out = Tensor._wrap(ls)
    return _record(
        "log_softmax", (a,), out,
        lambda g: (g - sm * g.sum(axis=1, keepdims=True),),
    )


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(np.atleast_2d(np.asarray(z, dtype=np.float64))))


def softmax_cross_entropy(logits, labels, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy between softmax(logits) and (smoothed) one-hot labels."""
    z = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if z.data.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross-entropy shape mismatch: logits {z.shape}, labels {labels.shape}")
    n, c = z.shape
    target = np.full((n, c), label_smoothing / c)
    target[np.arange(n), labels] += 1.0 - label_smoothing
    ls = _log_softmax(z.data)
    out = Tensor._wrap(-np.sum(target * ls) / n)
    sm = np.exp(ls)
    return _record(
        "softmax_cross_entropy", (z,), out,
        lambda g: (float(g) * (sm - target) / n,),
    )


# differentiation ------------------------------------------------------------

def grad(loss: Tensor, record: ComputationRecord) -> dict[int, Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. every watched parameter of ``record``."""
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if not record.contains(loss):
        raise ContractError("loss was not produced under this record")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = grads.pop(node.result, None)
        if g is None:
            continue
        for oid, og in zip(node.operands, node.backward(g)):
            if oid not in record._tracked:
                continue
            if oid in grads:
                grads[oid] = grads[oid] + og
            else:
                grads[oid] = og
    out = {}
    for pid, p in record.trainable.items():
        g = grads.get(pid)
        out[pid] = Tensor._wrap(np.zeros(p.shape) if g is None else np.reshape(g, p.shape))
    return out


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], params, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of ``loss_fn`` at ``params``."""
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    w = np.array(params.data if isinstance(params, Tensor) else params, dtype=np.float64)
    flat = w.reshape(-1)
    g = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(loss_fn(w.copy()))
        flat[i] = orig - eps
        fm = float(loss_fn(w.copy()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite loss while differencing coordinate {i}")
        g[i] = (fp - fm) / (2 * eps)
    return Tensor._wrap(g.reshape(w.shape))


# optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param) -> "AdamState":
        shape = np.shape(param.data if isinstance(param, Tensor) else param)
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_step(param, grad_, state: AdamState, lr: float = 5e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns the new parameter array and state."""
    p = param.data if isinstance(param, Tensor) else np.asarray(param, dtype=np.float64)
    g = grad_.data if isinstance(grad_, Tensor) else np.asarray(grad_, dtype=np.float64)
    if p.shape != g.shape or p.shape != state.m.shape or p.shape != state.v.shape:
        raise ShapeError(
            f"adam shape mismatch: param {p.shape}, grad {g.shape}, state {state.m.shape}"
        )
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * g
    v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    new = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)
