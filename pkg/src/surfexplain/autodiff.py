"""Reverse-mode automatic differentiation on numpy arrays.

Each op returns a new Tensor holding its parents and a backward closure;
the implicit graph of parent links is the tape. backward() resets the
gradients of every node reachable from the loss, seeds the loss with 1,
and runs the closures once each in reverse topological order, so there is
no global state and independent graphs can run concurrently.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

LOG_CLAMP = 1e-12

_DEFAULT_DTYPE = np.float64


class AutodiffError(ValueError):
    """Shape/index violation in a primitive op, named after the op."""


def set_default_dtype(spec) -> None:
    """Select float32 or float64 for newly created leaf tensors.

    64-bit is the default and is required by gradient checking; 32-bit is
    the training-speed option.
    """
    global _DEFAULT_DTYPE
    table = {"f32": np.float32, "f64": np.float64,
             np.float32: np.float32, np.float64: np.float64}
    if spec not in table:
        raise AutodiffError(f"unknown precision {spec!r}; use 'f32' or 'f64'")
    _DEFAULT_DTYPE = table[spec]


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._bwd = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self._op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; non-tensors are lifted to constant leaves
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def const(x) -> Tensor:
    """Non-differentiable leaf."""
    return Tensor(x, requires_grad=False)


def _node(data, parents, op, bwd) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(a.data * s, (a,), "scale", lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise AutodiffError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    return _node(a.data @ b.data, (a, b), "matmul",
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise AutodiffError(f"transpose: expected 2-D tensor, got shape {a.data.shape}")
    return _node(a.data.T, (a,), "transpose", lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise AutodiffError(f"reshape: {exc}") from exc
    return _node(data, (a,), "reshape",
                 lambda g: (np.ascontiguousarray(g).reshape(a.data.shape),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise AutodiffError(f"concat: {exc}") from exc
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tensors, "concat", bwd)


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        idx = idx.reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise AutodiffError(
            f"gather_rows: index out of range [0, {a.data.shape[0]}) in table")

    def bwd(g):
        # scatter-add: sparse transpose-matmul beats np.add.at by ~7x here
        if g.ndim == 2:
            n = idx.shape[0]
            mat = sp.csr_matrix(
                (np.ones(n, dtype=g.dtype), idx, np.arange(n + 1)),
                shape=(n, a.data.shape[0]))
            return (mat.T @ np.ascontiguousarray(g),)
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _node(a.data[idx], (a,), "gather_rows", bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), "relu",
                 lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(s, (a,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _node(s, (a,), "softmax", bwd)


def log(a: Tensor) -> Tensor:
    """Natural log clamped below at LOG_CLAMP; gradient is 0 in the clamp."""
    clamped = np.maximum(a.data, LOG_CLAMP)
    live = a.data > LOG_CLAMP
    return _node(np.log(clamped), (a,), "log",
                 lambda g: (g * live / clamped,))


def powc(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _node(a.data**p, (a,), "powc",
                 lambda g: (g * p * a.data**(p - 1.0),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.data.shape),)

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean", bwd)


def max_over_groups(a: Tensor, groups) -> Tensor:
    """Per-group, per-channel max: a is (V, C), groups is (G, K) row indices.

    The gradient is routed only to each group's (first) argmax element.
    """
    grp = np.asarray(groups, dtype=np.int64)
    if a.data.ndim != 2 or grp.ndim != 2:
        raise AutodiffError("max_over_groups: need (V, C) values and (G, K) groups")
    if grp.size and (grp.min() < 0 or grp.max() >= a.data.shape[0]):
        raise AutodiffError(
            f"max_over_groups: group index out of range [0, {a.data.shape[0]})")
    vals = a.data[grp]                      # (G, K, C)
    arg = vals.argmax(axis=1)               # (G, C), first max on ties
    out = np.take_along_axis(vals, arg[:, None, :], axis=1)[:, 0, :]
    n_groups, n_ch = arg.shape

    def bwd(g):
        rows = grp[np.arange(n_groups)[:, None], arg]   # (G, C) source rows
        cols = np.broadcast_to(np.arange(n_ch), (n_groups, n_ch))
        acc = np.zeros_like(a.data)
        np.add.at(acc, (rows.ravel(), cols.ravel()), g.ravel())
        return (acc,)

    return _node(out, (a,), "max_over_groups", bwd)


def norm2(a: Tensor) -> Tensor:
    """Euclidean norm of all elements; subgradient 0 at the origin."""
    n = float(np.sqrt((a.data * a.data).sum()))

    def bwd(g):
        if n == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / n,)

    return _node(np.asarray(n, dtype=a.data.dtype), (a,), "norm2", bwd)


def _toposort(root: Tensor):
    order, visited = [], set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every differentiable node reachable from `loss`.

    Gradients of the reachable subgraph are reset first, so repeated
    calls recompute rather than accumulate.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise AutodiffError("backward: loss does not depend on any differentiable tensor")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._bwd is None or node.grad is None:
            continue
        grads = node._bwd(node.grad)
        for parent, g in zip(node._parents, grads):
            if parent.requires_grad and g is not None:
                # views may flow in; accumulation always allocates fresh
                parent.grad = g if parent.grad is None else parent.grad + g


def zero_grads(params) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


class GradCheckReport:
    """Per-parameter max relative error of tape vs central differences."""

    def __init__(self, tolerance: float):
        self.tolerance = tolerance
        self.per_param: dict[str, float] = {}

    @property
    def max_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def failures(self):
        return {k: v for k, v in self.per_param.items() if v > self.tolerance}

    def __repr__(self):
        state = "PASS" if self.passed else "FAIL"
        return f"GradCheckReport({state}, max_error={self.max_error:.3e}, tol={self.tolerance:.1e})"


def grad_check(f, params: dict, step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of scalar f() against central differences.

    f must be deterministic and read the current .data of each parameter.
    The error for a coordinate is |a - n| / max(1, |a|, |n|), i.e.
    relative for large gradients and absolute below 1.
    """
    loss = f()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    report = GradCheckReport(tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = float(f().data)
            flat[i] = keep - step
            lo = float(f().data)
            flat[i] = keep
            numeric[i] = (hi - lo) / (2.0 * step)
        a = analytic[name].reshape(-1)
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        report.per_param[name] = float((np.abs(a - numeric) / denom).max()) if flat.size else 0.0
    return report
