"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Supports exactly what MLP classification losses and logit-regression guidance
terms need: matmul, bias add, relu, softmax, cross entropy (hard and soft
targets), squared-error losses, per-sample loss rows, and detach. A fresh
graph is built on every forward pass; ``backward`` walks it once in reverse
topological order.
"""

from __future__ import annotations

import numpy as np

LOG_FLOOR = 1e-12


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError):
    """Operand shapes are incompatible."""


class NumericError(AutodiffError):
    """Non-finite values where finite ones are required."""


class GraphError(AutodiffError):
    """Backward called on something that is not a live scalar loss."""


class Tensor:
    """Dense float64 array with an optional gradient and graph linkage.

    ``parents`` and ``backward_fn`` are set by the op that produced the
    tensor; leaves have neither. ``grad`` is lazily allocated and
    accumulated into by ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def parameter(data):
    return Tensor(data, requires_grad=True)


class GraphTape:
    """Topologically ordered record of the ops reaching one tensor.

    Each node appears after all of its parents, so reverse iteration is a
    valid backward schedule.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "GraphTape":
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def _wants_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def _result(data, parents, backward_fn):
    if _wants_grad(*parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _result(out_data, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias add: x[B,K] + b[K]."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add_bias shapes incompatible: {x.data.shape} + {b.data.shape}")
    out_data = x.data + b.data

    def backward(out):
        g = out.grad
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))

    return _result(out_data, (x, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad)
        if b.requires_grad:
            b.accumulate_grad(out.grad)

    return _result(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shapes differ: {a.data.shape} vs {b.data.shape}")
    out_data = a.data - b.data

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad)
        if b.requires_grad:
            b.accumulate_grad(-out.grad)

    return _result(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * b.data)
        if b.requires_grad:
            b.accumulate_grad(out.grad * a.data)

    return _result(out_data, (a, b), backward)


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = t.data * c

    def backward(out):
        if t.requires_grad:
            t.accumulate_grad(out.grad * c)

    return _result(out_data, (t,), backward)


def mul_const(t: Tensor, const) -> Tensor:
    """Elementwise product with a constant array (no gradient into the array)."""
    const = np.asarray(const, dtype=np.float64)
    if const.shape != t.data.shape:
        raise ShapeError(f"mul_const shapes differ: {t.data.shape} vs {const.shape}")
    out_data = t.data * const

    def backward(out):
        if t.requires_grad:
            t.accumulate_grad(out.grad * const)

    return _result(out_data, (t,), backward)


def relu(t: Tensor) -> Tensor:
    out_data = np.maximum(t.data, 0.0)

    def backward(out):
        if t.requires_grad:
            t.accumulate_grad(out.grad * (t.data > 0.0))

    return _result(out_data, (t,), backward)


def sum_all(t: Tensor) -> Tensor:
    out_data = t.data.sum()

    def backward(out):
        if t.requires_grad:
            t.accumulate_grad(np.full_like(t.data, out.grad.reshape(())))

    return _result(out_data, (t,), backward)


def sum_rows(t: Tensor) -> Tensor:
    """Row sums of a 2-D tensor: [B,K] -> [B]."""
    if t.data.ndim != 2:
        raise ShapeError(f"sum_rows needs a 2-D tensor, got shape {t.data.shape}")
    out_data = t.data.sum(axis=1)

    def backward(out):
        if t.requires_grad:
            t.accumulate_grad(np.repeat(out.grad[:, None], t.data.shape[1], axis=1))

    return _result(out_data, (t,), backward)


def softmax(z: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; rows of the result sum to 1."""
    if not np.all(np.isfinite(z.data)):
        raise NumericError("softmax input contains non-finite values")
    if z.data.shape[-1] < 2:
        raise ShapeError(f"softmax needs at least 2 classes, got shape {z.data.shape}")
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    q = e / e.sum(axis=-1, keepdims=True)

    def backward(out):
        if z.requires_grad:
            g = out.grad
            inner = (g * q).sum(axis=-1, keepdims=True)
            z.accumulate_grad(q * (g - inner))

    return _result(q, (z,), backward)


def _check_one_hot(y: np.ndarray, like: np.ndarray):
    if y.shape != like.shape:
        raise ShapeError(f"label shape {y.shape} does not match {like.shape}")
    rows = y.reshape(-1, y.shape[-1])
    if not (np.all((rows == 0.0) | (rows == 1.0)) and np.all(rows.sum(axis=-1) == 1.0)):
        raise ValueError("labels must be exactly one-hot")


def _batch_size(t: Tensor) -> int:
    return t.data.shape[0] if t.data.ndim >= 2 else 1


def cross_entropy(q: Tensor, y) -> Tensor:
    """Batch-mean cross entropy against one-hot labels.

    ``y`` is a constant one-hot array; the log argument is clamped at
    LOG_FLOOR so a zero probability cannot produce -inf.
    """
    y = np.asarray(y, dtype=np.float64)
    _check_one_hot(y, q.data)
    return soft_cross_entropy(q, y, _validate=False)


def soft_cross_entropy(q: Tensor, targets, _validate=True) -> Tensor:
    """Batch-mean cross entropy against an arbitrary constant distribution."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != q.data.shape:
        raise ShapeError(f"target shape {targets.shape} does not match {q.data.shape}")
    if _validate and (np.any(targets < 0.0) or np.any(np.abs(targets.sum(axis=-1) - 1.0) > 1e-6)):
        raise ValueError("soft targets must be nonnegative and sum to 1 per row")
    b = _batch_size(q)
    clamped = np.maximum(q.data, LOG_FLOOR)
    out_data = -(targets * np.log(clamped)).sum() / b

    def backward(out):
        if q.requires_grad:
            g = out.grad.reshape(())
            dq = np.where(q.data >= LOG_FLOOR, -targets / clamped, 0.0)
            q.accumulate_grad(g * dq / b)

    return _result(out_data, (q,), backward)


def cross_entropy_rows(q: Tensor, y) -> Tensor:
    """Per-sample cross entropy: [B,K] probabilities and one-hot labels -> [B]."""
    y = np.asarray(y, dtype=np.float64)
    _check_one_hot(y, q.data)
    clamped = np.maximum(q.data, LOG_FLOOR)
    out_data = -(y * np.log(clamped)).sum(axis=1)

    def backward(out):
        if q.requires_grad:
            dq = np.where(q.data >= LOG_FLOOR, -y / clamped, 0.0)
            q.accumulate_grad(out.grad[:, None] * dq)

    return _result(out_data, (q,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences divided by batch size (rows of ``a``)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse shapes differ: {a.data.shape} vs {b.data.shape}")
    n = _batch_size(a)
    diff = a.data - b.data
    out_data = (diff * diff).sum() / n

    def backward(out):
        g = out.grad.reshape(())
        if a.requires_grad:
            a.accumulate_grad(g * 2.0 * diff / n)
        if b.requires_grad:
            b.accumulate_grad(g * -2.0 * diff / n)

    return _result(out_data, (a, b), backward)


def sq_norm_rows(a: Tensor, b) -> Tensor:
    """Per-sample squared L2 distance between rows: [B,K] x [B,K] -> [B].

    ``b`` is a constant array (no gradient flows into it).
    """
    b = np.asarray(b, dtype=np.float64)
    if a.data.shape != b.shape:
        raise ShapeError(f"sq_norm_rows shapes differ: {a.data.shape} vs {b.shape}")
    diff = a.data - b
    out_data = (diff * diff).sum(axis=1)

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad[:, None] * 2.0 * diff)

    return _result(out_data, (a,), backward)


def weighted_mean(v: Tensor, w) -> Tensor:
    """Weighted batch mean of a loss row vector: sum(v*w)/B with constant w."""
    w = np.asarray(w, dtype=np.float64)
    if v.data.ndim != 1 or w.shape != v.data.shape:
        raise ShapeError(f"weighted_mean shapes incompatible: {v.data.shape} vs {w.shape}")
    if v.data.shape[0] == 0:
        raise ShapeError("weighted_mean of an empty batch")
    b = v.data.shape[0]
    out_data = (v.data * w).sum() / b

    def backward(out):
        if v.requires_grad:
            v.accumulate_grad(out.grad.reshape(()) * w / b)

    return _result(out_data, (v,), backward)


def detach(t: Tensor) -> Tensor:
    """Same values, no graph linkage; backward never reaches t's parents."""
    return Tensor(t.data)


def backward(loss: Tensor):
    """Populate grads of every requires-grad tensor reachable from ``loss``.

    Repeated calls accumulate; callers zero grads between optimizer steps.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GraphError("backward on a tensor with no live graph")
    tape = GraphTape.trace(loss)
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node)
