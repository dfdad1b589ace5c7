"""Minimal reverse-mode autodiff over float64 numpy arrays.

Each op builds a node holding its inputs and a closure that pushes the
node's gradient into them; backward() on a scalar does a topological sort
and runs the closures in reverse.  The graph is rebuilt every step.  No
general broadcasting: shapes must match exactly, except matrix + row-vector
add (bias) and scalar constants.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "_done")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, data={self.data!r})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        if self._done:
            raise RuntimeError("backward() already ran on this node; rebuild the graph")
        self._done = True
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node)

    # operator sugar; scalars are folded as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def add(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.shape != () and a.shape != ():
        # matrix + row vector (bias); no other broadcast allowed
        if not (a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]):
            raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, (a, b))

    def _bwd(o):
        g = o.grad
        a._accum(g if a.shape == o.shape else np.sum(g) if a.shape == () else g)
        if b.shape == o.shape:
            b._accum(g)
        elif b.shape == ():
            b._accum(np.sum(g))
        else:
            b._accum(g.sum(axis=0))

    out._backward = _bwd
    return out


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, (a,))
    out._backward = lambda o: a._accum(-o.grad)
    return out


def mul(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, (a, b))

    def _bwd(o):
        ga = o.grad * b.data
        gb = o.grad * a.data
        a._accum(ga if a.shape != () else np.sum(ga))
        b._accum(gb if b.shape != () else np.sum(gb))

    out._backward = _bwd
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul needs (n,k)@(k,m), got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, (a, b))

    def _bwd(o):
        a._accum(o.grad @ b.data.T)
        b._accum(a.data.T @ o.grad)

    out._backward = _bwd
    return out


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), (a,))
    out._backward = lambda o: a._accum(o.grad * (a.data > 0))
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; gradient goes to the larger operand, ties split equally."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"maximum shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(np.maximum(a.data, b.data), (a, b))

    def _bwd(o):
        wins_a = (a.data > b.data) + 0.5 * (a.data == b.data)
        a._accum(o.grad * wins_a)
        b._accum(o.grad * (1.0 - wins_a))

    out._backward = _bwd
    return out


def colmax(a: Tensor) -> Tensor:
    """Max over axis 0 of a 2-D tensor; ties share the gradient equally."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("colmax needs a 2-D tensor")
    out = Tensor(a.data.max(axis=0), (a,))

    def _bwd(o):
        hit = a.data == out.data
        a._accum(o.grad * hit / hit.sum(axis=0))

    out._backward = _bwd
    return out


def tsum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(), (a,))
    out._backward = lambda o: a._accum(np.full(a.shape, o.grad))
    return out


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """out[e] = a[index[e]] for a 1-D tensor; backward scatter-adds."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ValueError("gather source must be 1-D")
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.data.shape[0]):
        raise IndexError("gather index out of range")
    out = Tensor(a.data[index], (a,))

    def _bwd(o):
        a._accum(
            np.bincount(index.ravel(), weights=o.grad.ravel(), minlength=a.data.shape[0])
        )

    out._backward = _bwd
    return out


def round_ste(a: Tensor) -> Tensor:
    """Round half up in the forward pass, identity gradient."""
    a = as_tensor(a)
    out = Tensor(np.floor(a.data + 0.5), (a,))
    out._backward = lambda o: a._accum(o.grad)
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of row-softmax against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("need (batch, classes) logits and (batch,) labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    nll = -np.log(probs[np.arange(n), labels])
    out = Tensor(nll.mean(), (logits,))

    def _bwd(o):
        g = probs.copy()
        g[np.arange(n), labels] -= 1.0
        logits._accum(o.grad * g / n)

    out._backward = _bwd
    return out


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target
    out = Tensor(np.mean(diff * diff), (pred,))
    out._backward = lambda o: pred._accum(o.grad * 2.0 * diff / diff.size)
    return out
