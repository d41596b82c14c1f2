"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array. Every primitive records its parents and
a closure mapping the output gradient to input gradients, but only when at
least one input requires a gradient; constant subgraphs are never recorded,
which is how frozen encoders and stop-gradient targets stay detached.

Example:
    >>> x = Tensor([3.0], requires_grad=True)
    >>> grads = backward((x * x).sum())
    >>> float(grads[x][0])
    6.0
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DomainError, ShapeError

EPS_NORM = 1e-12
EPS_STD = 1e-8

_node_ids = itertools.count()

GradientMap = dict  # Tensor -> np.ndarray


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_backward")
    __array_ufunc__ = None  # ndarray (op) Tensor defers to the Tensor operators

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.op = op
        self._parents = parents
        self._backward = backward_fn

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators -----------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return negate(self)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, op=op, parents=parents, backward_fn=backward_fn)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad * bd, "mul", (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0.0):
        raise DomainError("div: division by zero")
    out = ad / bd

    def backward_fn(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, "div", (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, "matmul", (a, b), backward_fn)


# -- unary ----------------------------------------------------------------

def negate(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, "negate", (a,), lambda g: (-g,))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _node(a.data.T, "transpose", (a,), lambda g: (g.T,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp: overflow")
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(ad <= 0.0):
        raise DomainError("log: non-positive input")
    return _node(np.log(ad), "log", (a,), lambda g: (g / ad,))


def pow2(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, "pow2", (a,), lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.data)

    def backward_fn(g):
        if np.any(out == 0.0):
            raise DomainError("sqrt: gradient undefined at zero")
        return (0.5 * g / out,)

    return _node(out, "sqrt", (a,), backward_fn)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return _node(np.maximum(a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


# -- reductions and structure --------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,),
                 lambda g: (_expand_reduced(g, shape, axis, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax] for ax in axes]))
    if count == 0:
        raise ShapeError("mean: empty reduction")
    return _node(np.mean(a.data, axis=axis, keepdims=keepdims), "mean", (a,),
                 lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, "concat", tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None
    basic = _is_basic_index(index)

    def backward_fn(g):
        full = np.zeros(shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, dtype=np.float64), "slice", (a,), backward_fn)


def broadcast(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {tuple(shape)}") from None
    src = a.shape
    return _node(np.array(out), "broadcast", (a,), lambda g: (_unbroadcast(g, src),))


OPS: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul,
    "transpose": transpose, "exp": exp, "log": log, "pow2": pow2, "sqrt": sqrt,
    "negate": negate, "relu": relu, "sum": sum_, "mean": mean, "concat": concat,
    "slice": slice_, "broadcast": broadcast,
}


def forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply the primitive named ``op_kind``; see :data:`OPS`."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ContractError(f"unknown op {op_kind!r}") from None
    if op_kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# -- composites -----------------------------------------------------------

def logsumexp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp; the shift is a constant so gradients are exact."""
    a = as_tensor(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    total = log(sum_(exp(a - shift), axis=axis, keepdims=keepdims))
    return total + (shift if keepdims else np.squeeze(shift, axis=axis))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return a - logsumexp(a, axis=axis, keepdims=True)


def l2_normalize(z, axis: int = -1) -> Tensor:
    """Scale every slice along ``axis`` to unit Euclidean norm."""
    z = as_tensor(z)
    norms = sqrt(sum_(pow2(z), axis=axis, keepdims=True))
    if norms.data.size and np.min(norms.data) < EPS_NORM:
        raise DegenerateInputError("l2_normalize: slice with near-zero norm")
    return z / norms


def center(z, axis: int = 0) -> Tensor:
    z = as_tensor(z)
    return z - mean(z, axis=axis, keepdims=True)


def standardize(z, batch_axis: int = 0) -> Tensor:
    """Zero-mean, unit-variance features along the batch axis.

    A fixed ``1e-8`` is added to the variance inside the square root.
    """
    z = as_tensor(z)
    if z.shape[batch_axis] < 2:
        raise DegenerateInputError("standardize: batch extent must be >= 2")
    centered = center(z, batch_axis)
    var = mean(pow2(centered), axis=batch_axis, keepdims=True)
    if np.min(np.sqrt(var.data)) < EPS_STD:
        raise DegenerateInputError("standardize: constant feature dimension")
    return centered / sqrt(var + EPS_STD)


# -- backward pass --------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in seen:
                stack.append((parent, False))
    return order


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that take part in differentiation, inputs first."""
    return _topological_order(root) if root.requires_grad else []


def backward(loss: Tensor) -> GradientMap:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the gradients contributed by this call, keyed by leaf tensor.
    Constant tensors never appear in the result.
    """
    if loss.shape != ():
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    result: GradientMap = {}
    if not loss.requires_grad:
        return result
    pending: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        if not node._parents:
            g = np.array(g, dtype=np.float64).reshape(node.shape)
            result[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent.node_id)
            pending[parent.node_id] = pg if prev is None else prev + pg
    return result


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- finite differences ---------------------------------------------------

def _scalar(value) -> float:
    v = float(value.data) if isinstance(value, Tensor) else float(value)
    if not np.isfinite(v):
        raise DomainError("finite difference: non-finite function value")
    return v


def numerical_gradients(fn: Callable[[], object], tensors: Sequence[Tensor],
                        h: float = 1e-5) -> GradientMap:
    """Central differences of ``fn()`` w.r.t. each tensor, perturbing in place."""
    if h <= 0:
        raise DomainError("finite difference: step must be positive")
    out: GradientMap = {}
    for t in tensors:
        flat = t.data.reshape(-1)
        grad = np.zeros(flat.shape)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = _scalar(fn())
            flat[i] = orig - h
            lo = _scalar(fn())
            flat[i] = orig
            grad[i] = (hi - lo) / (2.0 * h)
        out[t] = grad.reshape(t.shape)
    return out


def finite_difference_gradient(f: Callable[[Tensor], object], x: Tensor,
                               h: float = 1e-5) -> GradientMap:
    return numerical_gradients(lambda: f(x), [x], h)


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], *, h: float = 1e-5,
              rtol: float = 1e-4, atol: float = 1e-7) -> tuple[bool, float]:
    """Compare backward against central differences.

    Returns ``(passed, worst)`` where ``worst`` is the largest violation ratio
    ``|analytic - numeric| / (atol + rtol * |numeric|)``; passing means worst <= 1.
    """
    zero_grad(tensors)
    analytic = backward(fn())
    numeric = numerical_gradients(fn, tensors, h)
    worst = 0.0
    for t in tensors:
        a = analytic.get(t, np.zeros(t.shape))
        n = numeric[t]
        ratio = np.abs(a - n) / (atol + rtol * np.abs(n))
        if ratio.size:
            worst = max(worst, float(ratio.max()))
    zero_grad(tensors)
    return worst <= 1.0, worst
