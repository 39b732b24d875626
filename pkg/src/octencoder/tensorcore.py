"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Only the ops the encoder, decoder and losses need are provided.  Every op
returns a new :class:`Tensor` that remembers its parents and a closure that
pushes the output gradient back to them; :func:`backward` walks the tape in
reverse topological order.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import NumericError, ShapeError

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NumericError(f"non-finite output in {op}")
    return out


def _node(out: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _finite(out, op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out)
    return Tensor(out, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        a._accumulate(g * c)

    return _node(a.data * c, (a,), bw, "scale")


def square(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(2.0 * a.data * g)

    return _node(a.data * a.data, (a,), bw, "square")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        a._accumulate(g * d)

    return _node(out, (a,), bw, "gelu")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` shaped (in, out)."""
    x = as_tensor(x)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1]))
        if b is not None and b.requires_grad:
            b._accumulate(g.reshape(-1, w.shape[1]).sum(axis=0))

    return _node(out, parents, bw, "linear")


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _node(out, (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        a._accumulate(np.transpose(g, inv))

    return _node(out, (a,), bw, "transpose")


def getitem(a: Tensor, key) -> Tensor:
    """Basic (non-overlapping) indexing only: ints, slices, Ellipsis."""
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a._accumulate(full)

    return _node(np.array(out), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _node(out, tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


def gather(a: Tensor, index, unique: bool = False) -> Tensor:
    """Rows ``a[index]`` along axis 0; ``index`` may have any shape.

    Entries equal to -1 yield zero rows.  ``unique=True`` promises the
    non-negative entries never repeat, which lets backward assign instead of
    scatter-add.
    """
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if index.size and (index.min() < -1 or index.max() >= n):
        raise ShapeError(f"gather: index out of range for {n} rows")
    flat = index.ravel()
    missing = flat < 0
    any_missing = bool(missing.any())
    if any_missing:
        out = a.data[np.where(index < 0, 0, index)]
        out[index < 0] = 0.0
    else:
        out = a.data[index]
    row_shape = a.shape[1:]

    def bw(g):
        g = g.reshape((-1,) + row_shape)
        src, rows = flat, g
        if any_missing:
            keep = ~missing
            src, rows = flat[keep], g[keep]
        if unique:
            full = np.zeros_like(a.data)
            full[src] = rows
        else:
            width = int(np.prod(row_shape)) if row_shape else 1
            scatter = sparse.csr_matrix((np.ones(len(src)), (src, np.arange(len(src)))),
                                        shape=(n, len(src)))
            full = np.asarray(scatter @ rows.reshape(len(src), width)).reshape(a.shape)
        a._accumulate(full)

    return _node(out, (a,), bw, "gather")


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- normalisation


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis with population variance."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = tuple(t for t in (x, gamma, beta) if t is not None)
    n = x.shape[-1]

    def bw(g):
        gx = g if gamma is None else g * gamma.data
        if x.requires_grad:
            dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                         - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(dx)
        g2 = g.reshape(-1, n)
        if gamma is not None and gamma.requires_grad:
            gamma._accumulate((g2 * xhat.reshape(-1, n)).sum(axis=0))
        if beta is not None and beta.requires_grad:
            beta._accumulate(g2.sum(axis=0))

    return _node(out, parents, bw, "layer_norm")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable, True = keep) zeroes masked entries exactly; every
    row must keep at least one entry.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (x,), bw, "softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean (or ``weights``-weighted) negative log-likelihood of integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    loss = -(w * logp[np.arange(n), labels]).sum()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(g * w[:, None] * p)

    return _node(np.asarray(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- autodiff driver


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tensor that requires it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        # route parent accumulation through the local dict so interior nodes
        # never keep .grad buffers alive
        for p in node._parents:
            if p.requires_grad and p._backward is not None:
                p.grad = grads.get(id(p))
        node._backward(g)
        for p in node._parents:
            if p.requires_grad and p._backward is not None:
                if p.grad is not None:
                    grads[id(p)] = p.grad
                p.grad = None


# ---------------------------------------------------------------- parameters


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class ParamStore:
    """Ordered name -> parameter map with optimizer state."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.opt_state: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def prefixed(self, prefix: str) -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def num_values(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def freeze(self, names: Iterable[str]) -> None:
        for n in names:
            self._params[n].requires_grad = False

    def state_arrays(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((n, t.data) for n, t in self._params.items())

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for n, t in self._params.items():
            other.add(n, t.data.copy()).requires_grad = t.requires_grad
        other.opt_state = {k: v.copy() for k, v in self.opt_state.items()}
        other.step_count = self.step_count
        return other


def _require_grads(params: ParamStore) -> None:
    if not any(t.grad is not None for _, t in params.items()):
        raise RuntimeError("optimizer step called before backward")


def sgd_step(params: ParamStore, lr: float, weight_decay: float = 0.0) -> None:
    _require_grads(params)
    for _, t in params.items():
        if t.grad is None or not t.requires_grad:
            continue
        g = t.grad + weight_decay * t.data if weight_decay else t.grad
        t.data -= lr * g
    params.step_count += 1


def adam_step(params: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Adam with bias correction (decoupled weight decay when nonzero)."""
    _require_grads(params)
    params.step_count += 1
    t_step = params.step_count
    c1 = 1.0 - beta1**t_step
    c2 = 1.0 - beta2**t_step
    for name, t in params.items():
        if t.grad is None or not t.requires_grad:
            continue
        m = params.opt_state.setdefault("adam.m/" + name, np.zeros_like(t.data))
        v = params.opt_state.setdefault("adam.v/" + name, np.zeros_like(t.data))
        m *= beta1
        m += (1.0 - beta1) * t.grad
        v *= beta2
        v += (1.0 - beta2) * t.grad * t.grad
        if weight_decay:
            t.data -= lr * weight_decay * t.data
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- finite differences


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error; 0 when both are exactly zero."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
