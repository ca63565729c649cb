"""Reverse-mode differentiation over float64 numpy arrays.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure pushing the output gradient back to them. The graph
built by a forward pass *is* the tape: :func:`backward` sorts it
topologically from the loss and replays the closures in reverse.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from pmmoe.errors import DimensionError

from .ops import log_softmax


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f"{self.name!r}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def backward(self) -> None:
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable[[np.ndarray], None]) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=fn)
    return Tensor(data)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Fill ``.grad`` for every tensor reachable from ``loss`` that requires grad.

    Gradients are recomputed from scratch on each call. Returns a map from
    leaf tensors (the trainable parameters) to their gradients; leaves that
    do not require grad are absent.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad if node.grad is not None else np.zeros_like(node.data))
        elif not node._parents:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            leaves[node] = node.grad
    return leaves


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` for ``params`` in order; zeros where unreachable."""
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    def fn(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), fn)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), fn)


def tsum(a: Tensor) -> Tensor:
    def fn(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(np.asarray(a.data.sum()), (a,), fn)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def fn(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _node(np.asarray(a.data.mean()), (a,), fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def fn(g):
        _accumulate(a, g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), fn)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope)

    def fn(g):
        _accumulate(a, g * scale)

    return _node(a.data * scale, (a,), fn)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def fn(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for a single vector ``x[in]`` or a batch ``x[n, in]``."""
    if x.data.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input of shape {x.shape} does not match weight of shape {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def fn(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data)
        g2 = g if g.ndim == 2 else g[None, :]
        if w.requires_grad:
            x2 = x.data if x.data.ndim == 2 else x.data[None, :]
            _accumulate(w, g2.T @ x2)
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0))

    return _node(out, parents, fn)


# -- routing and losses ------------------------------------------------------


def masked_softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax restricted to ``mask``; masked-out entries are exactly 0."""
    z = logits.data
    if mask is None:
        mask = np.ones(z.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
    if not mask.any(axis=-1).all():
        raise DimensionError("masked_softmax: a row has no active entry")
    shifted = np.where(mask, z, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        _accumulate(logits, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _node(p, (logits,), fn)


def mix(alpha: Tensor, experts: Sequence[Tensor]) -> Tensor:
    """Per-row convex mixture ``sum_l alpha[:, l] * experts[l]``.

    ``alpha`` is ``[n, P]`` and every expert output is ``[n, D]``. Experts whose
    weight column is entirely zero are skipped in the forward sum.
    """
    a = alpha.data
    if a.ndim != 2 or a.shape[1] != len(experts):
        raise DimensionError(f"mix: weights of shape {a.shape} for {len(experts)} experts")
    out = np.zeros_like(experts[0].data)
    for l, e in enumerate(experts):
        if e.shape != experts[0].shape:
            raise DimensionError(f"mix: expert {l} has shape {e.shape}, expected {experts[0].shape}")
        col = a[:, l : l + 1]
        if col.any():
            out = out + col * e.data

    def fn(g):
        ga = np.stack([(g * e.data).sum(axis=-1) for e in experts], axis=1)
        _accumulate(alpha, ga)
        for l, e in enumerate(experts):
            _accumulate(e, a[:, l : l + 1] * g)

    return _node(out, (alpha, *experts), fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits[n, C]`` against integer ``labels[n]``."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data if logits.data.ndim == 2 else logits.data[None, :]
    n, c = z.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {labels.shape[0] if labels.ndim else 1} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DimensionError(f"cross_entropy: label outside [0, {c})")
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        d *= g / n
        _accumulate(logits, d.reshape(logits.shape))

    return _node(np.asarray(loss), (logits,), fn)


def parameters_of(modules: Iterable) -> list[Tensor]:
    out: list[Tensor] = []
    for m in modules:
        out.extend(m.parameters())
    return out
