"""Small reverse-mode autodiff over float64 numpy arrays, plus Adam.

Graphs are built dynamically: every op returns a new :class:`Tensor` that
remembers its parents and a closure propagating the output gradient back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out dimensions introduced or stretched by numpy broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, parents=(), op="leaf", name=None):
        self.data = _as_array(data)
        self.grad = None
        self.op = op
        self.name = name
        self._parents = parents
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"{self.op}: item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def tensor(x, name=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, name=name)


def _node(data, parents, op, backward) -> Tensor:
    out = Tensor(data, parents, op)
    out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    try:
        data = a.data / b.data
    except ValueError as exc:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(data, (a, b), "div", backward)


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(data, (a, b), "matmul", backward)


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` as a single node (saves one graph node per layer)."""
    x, w, b = tensor(x), tensor(w), tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    data = x.data @ w.data + b.data

    def backward(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(data, (x, w, b), "linear", backward)


def tanh(x) -> Tensor:
    x = tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _node(y, (x,), "tanh", backward)


def relu(x) -> Tensor:
    x = tensor(x)
    mask = x.data > 0
    y = np.where(mask, x.data, 0.0)

    def backward(g):
        return (g * mask,)

    return _node(y, (x,), "relu", backward)


def exp(x) -> Tensor:
    x = tensor(x)
    y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return _node(y, (x,), "exp", backward)


def log(x) -> Tensor:
    x = tensor(x)
    if np.any(x.data <= 0):
        raise NonFiniteError("log: non-positive input")
    y = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _node(y, (x,), "log", backward)


def sqrt(x) -> Tensor:
    x = tensor(x)
    if np.any(x.data < 0):
        raise NonFiniteError("sqrt: negative input")
    y = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / y,)

    return _node(y, (x,), "sqrt", backward)


def square(x) -> Tensor:
    x = tensor(x)

    def backward(g):
        return (2.0 * g * x.data,)

    return _node(x.data * x.data, (x,), "square", backward)


def abs_(x) -> Tensor:
    x = tensor(x)

    def backward(g):
        return (g * np.sign(x.data),)

    return _node(np.abs(x.data), (x,), "abs", backward)


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        return (_expand(g, x.shape, axis, keepdims).copy(),)

    return _node(y, (x,), "sum", backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    if n == 0:
        raise ShapeError("mean: empty reduction")
    y = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        return (_expand(g, x.shape, axis, keepdims) / n,)

    return _node(y, (x,), "mean", backward)


def logsumexp(x, axis=None, keepdims=False) -> Tensor:
    """Overflow-safe ``log(sum(exp(x)))``; the max is subtracted first."""
    x = tensor(x)
    if x.data.size == 0:
        raise ShapeError("logsumexp: empty input")
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    y = np.log(s) + m
    soft = e / s
    if not keepdims:
        y = np.squeeze(y, axis=axis) if axis is not None else y.reshape(())

    def backward(g):
        return (_expand(g, x.shape, axis, keepdims) * soft,)

    return _node(y, (x,), "logsumexp", backward)


def logmeanexp(x, axis=None, keepdims=False) -> Tensor:
    x = tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return sub(logsumexp(x, axis=axis, keepdims=keepdims), math.log(n))


def reshape(x, shape) -> Tensor:
    x = tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from exc

    def backward(g):
        return (g.reshape(x.shape),)

    return _node(y, (x,), "reshape", backward)


def index(x, idx) -> Tensor:
    x = tensor(x)
    y = x.data[idx]

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(y, (x,), "index", backward)


def pick(x, cols) -> Tensor:
    """Row-wise gather: ``x[i, cols[i]]`` for a 2-D ``x``."""
    x = tensor(x)
    cols = np.asarray(cols, dtype=np.int64)
    if x.ndim != 2 or cols.shape != (x.shape[0],):
        raise ShapeError(f"pick: need (N, K) tensor and (N,) indices, got {x.shape}, {cols.shape}")
    rows = np.arange(x.shape[0])
    y = x.data[rows, cols]

    def backward(g):
        out = np.zeros_like(x.data)
        out[rows, cols] = g
        return (out,)

    return _node(y, (x,), "pick", backward)


def concat(xs, axis=0) -> Tensor:
    xs = [tensor(x) for x in xs]
    try:
        y = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(y, tuple(xs), "concat", backward)


def huber(x, delta=1.0) -> Tensor:
    x = tensor(x)
    a = np.abs(x.data)
    quad = a <= delta
    y = np.where(quad, 0.5 * x.data * x.data, delta * (a - 0.5 * delta))

    def backward(g):
        return (g * np.where(quad, x.data, delta * np.sign(x.data)),)

    return _node(y, (x,), "huber", backward)


def rowdot(a, b) -> Tensor:
    """Per-row inner product of two (N, D) tensors."""
    a, b = tensor(a), tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"rowdot: shapes {a.shape} and {b.shape}")
    y = np.einsum("ij,ij->i", a.data, b.data)

    def backward(g):
        return g[:, None] * b.data, g[:, None] * a.data

    return _node(y, (a, b), "rowdot", backward)


def cosine(a, b) -> Tensor:
    """Row-wise cosine similarity; ``dot / sqrt(|a|^2 |b|^2)``.

    Written this way so that identical rows give exactly 1.0.
    """
    a, b = tensor(a), tensor(b)
    na, nb = rowdot(a, a), rowdot(b, b)
    if np.any(na.data == 0) or np.any(nb.data == 0):
        raise ZeroDivisionError("cosine: zero-norm embedding")
    return div(rowdot(a, b), sqrt(mul(na, nb)))


def pairwise_cosine(a, b) -> Tensor:
    """(N, D) x (M, D) -> (N, M) matrix of cosine similarities."""
    a, b = tensor(a), tensor(b)
    na = sum_(square(a), axis=1, keepdims=True)
    nb = sum_(square(b), axis=1, keepdims=True)
    if np.any(na.data == 0) or np.any(nb.data == 0):
        raise ZeroDivisionError("pairwise_cosine: zero-norm embedding")
    return div(matmul(a, transpose(b)), sqrt(mul(na, transpose(nb))))


def transpose(x) -> Tensor:
    x = tensor(x)

    def backward(g):
        return (g.T,)

    return _node(x.data.T, (x,), "transpose", backward)


def backward(loss: Tensor) -> list[Tensor]:
    """Fill ``.grad`` on every node reachable from ``loss``.

    Returns the nodes in topological order (inputs first).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            parent._accum(np.asarray(g, dtype=np.float64).reshape(parent.shape))
    return order


def grad(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. named leaf tensors; unreached leaves get zeros."""
    for p in params.values():
        p.grad = None
    backward(loss)
    return {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }


def leaves(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, name=k) for k, v in params.items()}


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            self.learning_rate, self.beta1, self.beta2, self.eps, self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              inplace: bool = False):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    By default the inputs are untouched. With ``inplace=True`` the parameter and
    moment arrays are updated in place (after all gradients are validated) and
    the same objects are returned.
    """
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"adam_step: gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise ShapeError(f"adam_step: {k!r} grad shape {g.shape} != param shape {params[k].shape}")
        # a single reduction catches any nan/inf; the full scan only runs to confirm
        if not math.isfinite(float(np.sum(g))) and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter {k!r}")
    if inplace:
        new = state
        new.step += 1
        out = params
    else:
        new = AdamState(state.learning_rate, state.beta1, state.beta2, state.eps, state.step + 1,
                        dict(state.m), dict(state.v))
        out = {}
    b1, b2 = new.beta1, new.beta2
    c1 = 1.0 - b1**new.step
    c2 = 1.0 - b2**new.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m_old, v_old = state.m.get(k), state.v.get(k)
        if inplace and m_old is not None:
            m, v = m_old, v_old
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            gg = g * g
            gg *= 1.0 - b2
            v += gg
        else:
            m = g * (1.0 - b1)
            if m_old is not None:
                m += b1 * m_old
            v = g * g
            v *= 1.0 - b2
            if v_old is not None:
                v += b2 * v_old
        new.m[k], new.v[k] = m, v
        denom = v * (1.0 / c2)
        np.sqrt(denom, out=denom)
        denom += new.eps
        step = m * (new.learning_rate / c1)
        step /= denom
        if inplace:
            p -= step
        else:
            out[k] = p - step
    return out, new


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}
