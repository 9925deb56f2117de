"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation on a tensor that requires gradients records its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
that record in reverse topological order. The record is rebuilt on every
forward pass; nothing is cached between passes.

Broadcasting is limited to scalars, row vectors and column vectors against a
matrix.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12

OP_KINDS = (
    "matmul", "add", "sub", "mul", "div", "scalar_mul", "neg", "relu",
    "sigmoid", "tanh", "exp", "log", "abs", "sum", "mean", "softmax_rows",
    "log_softmax_rows", "concat_rows", "concat_cols", "slice", "smooth_step",
)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rule."""


class Tensor:
    """A node in the computation record.

    Leaves are created directly; interior nodes are created by operations and
    keep a reference to their parents. ``grad`` is only populated on leaves
    that require gradients, and accumulates across ``backward`` calls until
    ``zero_grad`` is called.
    """

    __array_priority__ = 100  # keep ndarray.__mul__ from hijacking Tensor operands

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (),
                 _op: str = "leaf", _backward: Callable | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"only rank 0-2 tensors are supported, got shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = _op
        self._parents = _parents
        self._backward = _backward

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def parents(self) -> tuple["Tensor", ...]:
        return self._parents

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self, requires_grad: bool = False) -> "Tensor":
        return Tensor(self.data, requires_grad=requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{rg})"

    __hash__ = object.__hash__

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def abs(self) -> "Tensor":
        return abs_(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _op=op,
                      _backward=backward)
    return Tensor(data, _op=op)


# -- broadcasting helpers ----------------------------------------------------

def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    for small, big in ((a, b), (b, a)):
        if len(small) == 0 or small == (1,) or small == (1, 1):
            return big
        if len(big) == 2:
            rows, cols = big
            if small in ((cols,), (1, cols), (rows, 1)):
                return big
    raise ShapeError(f"{op}: incompatible shapes {a} and {b} "
                     "(only scalar, row- and column-vector broadcasting is supported)")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    if len(shape) < grad.ndim:
        grad = grad.sum(axis=tuple(range(grad.ndim - len(shape))))
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- elementwise binary ops --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.data, b.data
    return _make(av * bv, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    av, bv = a.data, b.data
    out = av / bv
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def scalar_mul(a: Tensor, k: float) -> Tensor:
    return _make(a.data * k, (a,), "scalar_mul", lambda g: (g * k,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data
    return _make(av @ bv, (a, b), "matmul", lambda g: (g @ bv.T, av.T @ g))


# -- elementwise unary ops ---------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    inside = x > LOG_FLOOR
    safe = np.where(inside, x, LOG_FLOOR)
    return _make(np.log(safe), (a,), "log", lambda g: (np.where(inside, g / safe, 0.0),))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), "abs", lambda g: (g * s,))


def smooth_step(a: Tensor, gamma: float) -> Tensor:
    """C1 cubic ramp from 0 (t <= -gamma/2) to 1 (t >= gamma/2)."""
    if gamma <= 0:
        raise ValueError(f"smooth_step: gamma must be positive, got {gamma}")
    t = a.data
    lo, hi = t <= -gamma / 2, t >= gamma / 2
    mid = ~(lo | hi)
    cubic = -2.0 / gamma**3 * t**3 + 1.5 / gamma * t + 0.5
    out = np.where(lo, 0.0, np.where(hi, 1.0, cubic))
    slope = np.where(mid, -6.0 / gamma**3 * t**2 + 1.5 / gamma, 0.0)
    return _make(out, (a,), "smooth_step", lambda g: (g * slope,))


# -- reductions and row ops --------------------------------------------------

def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), "sum", back)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    n = a.size if axis is None else shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(out, (a,), "mean", back)


def _rows(a: Tensor, op: str) -> np.ndarray:
    if a.ndim == 1:
        return a.data[None, :]
    if a.ndim == 2:
        return a.data
    raise ShapeError(f"{op}: needs a rank-1 or rank-2 tensor, got shape {a.shape}")


def softmax_rows(a: Tensor) -> Tensor:
    x = _rows(a, "softmax_rows")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    shape = a.shape

    def back(g):
        g2 = g.reshape(p.shape)
        return ((p * (g2 - (g2 * p).sum(axis=1, keepdims=True))).reshape(shape),)

    return _make(p.reshape(shape), (a,), "softmax_rows", back)


def log_softmax_rows(a: Tensor) -> Tensor:
    x = _rows(a, "log_softmax_rows")
    z = x - x.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)
    shape = a.shape

    def back(g):
        g2 = g.reshape(p.shape)
        return ((g2 - p * g2.sum(axis=1, keepdims=True)).reshape(shape),)

    return _make(out.reshape(shape), (a,), "log_softmax_rows", back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate rank-2 tensors along rows (axis 0) or columns (axis 1)."""
    tensors = [as_tensor(t) for t in tensors]
    op = "concat_rows" if axis == 0 else "concat_cols"
    if not tensors:
        raise ShapeError(f"{op}: nothing to concatenate")
    if any(t.ndim != 2 for t in tensors):
        raise ShapeError(f"{op}: needs rank-2 tensors, got {[t.shape for t in tensors]}")
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise ShapeError(f"{op}: mismatched shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        if axis == 0:
            return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, op, back)


def slice_(a: Tensor, key) -> Tensor:
    keys = key if isinstance(key, tuple) else (key,)
    if not all(isinstance(k, slice) for k in keys):
        raise TypeError("slice: only basic slices are supported (use t[:, k:k+1] for a column)")
    shape = a.shape
    out = a.data[key]

    def back(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _make(out, (a,), "slice", back)


_DISPATCH: dict[str, Callable] = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "div": div,
    "scalar_mul": scalar_mul, "neg": neg, "relu": relu, "sigmoid": sigmoid,
    "tanh": tanh, "exp": exp, "log": log, "abs": abs_, "sum": sum_, "mean": mean,
    "softmax_rows": softmax_rows, "log_softmax_rows": log_softmax_rows,
    "concat_rows": lambda *ts: concat(ts, axis=0),
    "concat_cols": lambda *ts: concat(ts, axis=1),
    "slice": slice_, "smooth_step": smooth_step,
}


def forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply ``op_kind`` by name. Extra arguments (axis, key, gamma, k) pass through."""
    try:
        fn = _DISPATCH[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}; expected one of {', '.join(OP_KINDS)}") from None
    return fn(*inputs, **kwargs)


# -- reverse pass --------------------------------------------------------------

def trace(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, accumulate: bool = True) -> dict[Tensor, np.ndarray]:
    """Reverse pass from a scalar ``root``.

    Returns a map from every gradient-carrying node on the record to
    d(root)/d(node). With ``accumulate`` leaves also add into ``.grad``.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = trace(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
    result = {}
    for node in order:
        g = grads.get(id(node))
        if g is None:
            continue
        result[node] = g
        if accumulate and node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
    return result


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """d(root)/d(w) for each ``w`` (zeros where ``root`` does not depend on it)."""
    gmap = backward(root)
    return [gmap.get(w, np.zeros(w.shape)) for w in wrt]


def finite_diff_check(f: Callable[[Tensor], Tensor], params: Tensor, step: float = 1e-4) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if step <= 0:
        raise ValueError(f"finite_diff_check: step must be positive, got {step}")
    x0 = np.array(params.data)
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("finite_diff_check: f returned a non-finite value")
    analytic = backward(out).get(leaf, np.zeros(x0.shape)).reshape(-1)
    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        fp = f(Tensor(plus.reshape(x0.shape))).item()
        fm = f(Tensor(minus.reshape(x0.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("finite_diff_check: f returned a non-finite value")
        numeric[i] = (fp - fm) / (2 * step)
    if flat.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
