"""Dense float64 computation graph with reverse-mode differentiation.

Every op takes :class:`Node` operands and returns a new :class:`Node` whose
backward rule accumulates into the operands' ``grad`` buffers.  There is no
implicit broadcasting; row-vector bias additions and per-row scaling are
separate ops (:func:`add_rowvec`, :func:`scale_rows`) so each backward rule
stays a one-liner that can be audited against its forward.

Example::

    >>> a = param([[1.0, 2.0], [3.0, 4.0]])
    >>> loss = sum_all(mul(a, a))
    >>> backward(loss)
    >>> a.grad
    array([[2., 4.],
           [6., 8.]])
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError, NonFiniteError

__all__ = [
    "Tensor",
    "Node",
    "param",
    "constant",
    "detach",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "tanh",
    "relu",
    "log",
    "power",
    "concat",
    "index",
    "reshape",
    "transpose",
    "add_rowvec",
    "scale_rows",
    "sum_rows",
    "sum_all",
    "mean_all",
    "softmax_rows",
    "gru_sequence",
    "elementwise",
    "backward",
    "zero_grad",
    "grad_check",
]


class Tensor:
    """Immutable row-major float64 array that never holds NaN or Inf."""

    __slots__ = ("data",)

    def __init__(self, data, shape=None):
        arr = np.array(data, dtype=np.float64)
        if shape is not None:
            arr = arr.reshape(shape)
        self.data = _freeze(arr)

    @classmethod
    def _own(cls, arr: np.ndarray) -> "Tensor":
        # arr must be a fresh float64 buffer nobody else writes to
        t = cls.__new__(cls)
        t.data = _freeze(arr)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, data={self.data.tolist()})"


def _freeze(arr: np.ndarray) -> np.ndarray:
    if arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    # a NaN/Inf entry always poisons the sum of squares; only overflow needs the full scan
    flat = arr.reshape(-1)
    with np.errstate(over="ignore"):
        ss = flat @ flat
    if not math.isfinite(ss) and not np.isfinite(arr).all():
        raise NonFiniteError(f"tensor of shape {list(arr.shape)} contains NaN or Inf")
    arr.flags.writeable = False
    return arr


class Node:
    """A value in the graph together with its gradient accumulator."""

    __slots__ = ("value", "_grad", "parents", "op", "_backward", "requires_grad")

    def __init__(self, value: Tensor, parents=(), op: str = "leaf", backward_fn=None,
                 requires_grad: bool = False):
        self.value = value
        self._grad = None
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward_fn
        self.requires_grad = requires_grad

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> tuple:
        return self.value.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros(self.shape)
        return self._grad

    def _accum(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self._grad += g

    def zero_grad(self) -> None:
        self._grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(op={self.op}, shape={list(self.shape)})"


def param(data) -> Node:
    """Leaf node that receives gradients."""
    value = data if isinstance(data, Tensor) else Tensor(data)
    return Node(value, requires_grad=True)


def constant(data) -> Node:
    """Leaf node excluded from differentiation."""
    if isinstance(data, Node):
        return Node(data.value)
    value = data if isinstance(data, Tensor) else Tensor(data)
    return Node(value)


def detach(a: Node) -> Node:
    return Node(a.value)


def _make(arr: np.ndarray, parents: Sequence[Node], op: str, backward_fn) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(Tensor._own(arr), parents, op, backward_fn if needs else None, needs)


def _same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} differ")


# -- linear algebra ---------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    A, B = a.data, b.data

    def bw(g):
        if a.requires_grad:
            a._accum(g @ B.T)
        if b.requires_grad:
            b._accum(A.T @ g)

    return _make(A @ B, (a, b), "matmul", bw)


def transpose(a: Node) -> Node:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {list(a.shape)}")

    def bw(g):
        a._accum(g.T)

    return _make(a.data.T.copy(), (a,), "transpose", bw)


def reshape(a: Node, shape) -> Node:
    shape = tuple(shape)
    if math.prod(shape) != a.data.size:
        raise DimensionError(f"reshape: cannot view {list(a.shape)} as {list(shape)}")
    old = a.shape

    def bw(g):
        a._accum(g.reshape(old))

    return _make(a.data.reshape(shape).copy(), (a,), "reshape", bw)


# -- elementwise ------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a: Node, b: Node) -> Node:
    _same_shape(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a: Node, b: Node) -> Node:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data

    def bw(g):
        if a.requires_grad:
            a._accum(g * B)
        if b.requires_grad:
            b._accum(g * A)

    return _make(A * B, (a, b), "mul", bw)


def scale(a: Node, c: float) -> Node:
    c = float(c)

    def bw(g):
        a._accum(g * c)

    return _make(a.data * c, (a,), "scale", bw)


def sigmoid(a: Node) -> Node:
    x = a.data
    # exp of a non-positive argument only, so large |x| cannot overflow
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        a._accum(g * s * (1.0 - s))

    return _make(s, (a,), "sigmoid", bw)


def tanh(a: Node) -> Node:
    t = np.tanh(a.data)

    def bw(g):
        a._accum(g * (1.0 - t * t))

    return _make(t, (a,), "tanh", bw)


def relu(a: Node) -> Node:
    mask = a.data > 0

    def bw(g):
        a._accum(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), "relu", bw)


def log(a: Node, floor: float = 1e-12) -> Node:
    """Natural log of ``max(a, floor)``; zero gradient where the clamp is active."""
    x = a.data
    live = x > floor
    safe = np.where(live, x, floor)

    def bw(g):
        a._accum(np.where(live, g / safe, 0.0))

    return _make(np.log(safe), (a,), "log", bw)


def power(a: Node, k: float) -> Node:
    """Elementwise ``a**k`` for a constant exponent; requires ``a >= 0`` unless k is integral."""
    k = float(k)
    x = a.data
    if not k.is_integer() and (x < 0).any():
        raise ContractError("power: fractional exponent of a negative base")
    out = x ** k

    def bw(g):
        if k == 0.0:
            return
        with np.errstate(divide="ignore", invalid="ignore"):
            d = k * x ** (k - 1.0)
        a._accum(g * np.where(np.isfinite(d), d, 0.0))

    return _make(out, (a,), "power", bw)


# -- structural -------------------------------------------------------------


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    """Join nodes along ``axis``; for 1-D inputs this is plain vector concatenation."""
    nodes = list(nodes)
    if not nodes:
        raise ContractError("concat: no operands")
    ndim = nodes[0].data.ndim
    ax = axis % ndim
    for n in nodes[1:]:
        if n.data.ndim != ndim or any(
            n.shape[i] != nodes[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {list(nodes[0].shape)} and {list(n.shape)} disagree off axis {ax}"
            )
    sizes = [n.shape[ax] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            if n.requires_grad:
                sl = [slice(None)] * ndim
                sl[ax] = slice(lo, hi)
                n._accum(g[tuple(sl)])

    return _make(np.concatenate([n.data for n in nodes], axis=ax), nodes, "concat", bw)


def index(a: Node, key) -> Node:
    """Basic slicing (ints and slices only); the result is a copy."""
    out = np.array(a.data[key], dtype=np.float64)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[key] += g
        a._accum(full)

    return _make(out, (a,), "index", bw)


def add_rowvec(a: Node, b: Node) -> Node:
    """Add the length-n vector ``b`` to every row of the m×n matrix ``a``."""
    if a.data.ndim != 2 or b.shape != (a.shape[1],):
        raise DimensionError(f"add_rowvec: {list(a.shape)} + row {list(b.shape)}")

    def bw(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g.sum(axis=0))

    return _make(a.data + b.data, (a, b), "add_rowvec", bw)


def scale_rows(a: Node, c: Node) -> Node:
    """Multiply row i of the m×n matrix ``a`` by the scalar ``c[i, 0]``."""
    if a.data.ndim != 2 or c.shape != (a.shape[0], 1):
        raise DimensionError(f"scale_rows: {list(a.shape)} by column {list(c.shape)}")
    A, C = a.data, c.data

    def bw(g):
        if a.requires_grad:
            a._accum(g * C)
        if c.requires_grad:
            c._accum((g * A).sum(axis=1, keepdims=True))

    return _make(A * C, (a, c), "scale_rows", bw)


def sum_rows(a: Node) -> Node:
    """Row sums of an m×n matrix as an m×1 column."""
    if a.data.ndim != 2:
        raise DimensionError(f"sum_rows: expected a matrix, got {list(a.shape)}")
    shape = a.shape

    def bw(g):
        a._accum(np.broadcast_to(g, shape))

    return _make(a.data.sum(axis=1, keepdims=True), (a,), "sum_rows", bw)


def sum_all(a: Node) -> Node:
    shape = a.shape

    def bw(g):
        a._accum(np.full(shape, g[0]))

    return _make(np.array([a.data.sum()]), (a,), "sum_all", bw)


def mean_all(a: Node) -> Node:
    shape, n = a.shape, a.data.size

    def bw(g):
        a._accum(np.full(shape, g[0] / n))

    return _make(np.array([a.data.sum() / n]), (a,), "mean_all", bw)


def softmax_rows(a: Node) -> Node:
    x = a.data
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax_rows: expected an m×n matrix with n >= 1, got {list(a.shape)}")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        a._accum(s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _make(s, (a,), "softmax_rows", bw)


def gru_sequence(X: np.ndarray, gates: Sequence[Node], h0: np.ndarray | None = None) -> Node:
    """Whole-sequence GRU as one node, with a hand-written BPTT backward.

    ``X`` is a constant B×T×d_in array, ``gates`` the nine parameter nodes
    ``(W_r, W_z, W_h, U_r, U_z, U_h, b_r, b_z, b_h)``.  Returns the hidden
    states stacked time-major as a (T·B)×d_h node: row ``t·B + b`` is h_t of
    sample b.  Same recurrence as the op-by-op composition in
    :func:`trifuse.encoders.gru_forward`.
    """
    W_r, W_z, W_h, U_r, U_z, U_h, b_r, b_z, b_h = gates
    B, T, d = X.shape
    dh = W_r.shape[1]
    if W_r.shape[0] != d:
        raise DimensionError(f"gru_sequence: input dim {d} vs weights {list(W_r.shape)}")
    W = np.concatenate([W_r.data, W_z.data, W_h.data], axis=1)
    Urz = np.concatenate([U_r.data, U_z.data], axis=1)
    Uh = U_h.data
    bias = np.concatenate([b_r.data, b_z.data, b_h.data])
    Xflat = np.ascontiguousarray(X.transpose(1, 0, 2)).reshape(T * B, d)  # time-major rows
    GX = (Xflat @ W + bias).reshape(T, B, 3 * dh)
    h_init = np.zeros((B, dh)) if h0 is None else np.array(h0, dtype=np.float64).reshape(B, dh)
    H = np.empty((T, B, dh))
    RZ = np.empty((T, B, 2 * dh))
    RH = np.empty((T, B, dh))
    C = np.empty((T, B, dh))
    _kernels.gru_fwd(GX, np.ascontiguousarray(Urz), np.ascontiguousarray(Uh), h_init, H, RZ, RH, C)

    def bw(g):
        DA = np.empty((T, B, 3 * dh))  # gradient wrt gate pre-activations
        _kernels.gru_bwd(np.ascontiguousarray(g.reshape(T, B, dh)), H, h_init, RZ, C, Urz, Uh, DA)
        DA2 = DA.reshape(T * B, 3 * dh)
        prev = np.concatenate([h_init[None], H[:-1]]).reshape(T * B, dh)
        dW = Xflat.T @ DA2
        dUrz = prev.T @ DA2[:, : 2 * dh]
        dUh = RH.reshape(T * B, dh).T @ DA2[:, 2 * dh:]
        db = DA2.sum(axis=0)
        parts = (dW[:, :dh], dW[:, dh:2 * dh], dW[:, 2 * dh:], dUrz[:, :dh], dUrz[:, dh:], dUh,
                 db[:dh], db[dh:2 * dh], db[2 * dh:])
        for node, part in zip(gates, parts):
            if node.requires_grad:
                node._accum(part)

    return _make(H.reshape(T * B, dh), tuple(gates), "gru_sequence", bw)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "mul": mul}


def elementwise(op: str, a, b=None, factor: float | None = None) -> Node:
    """Dispatch by name: add, mul, sigmoid, tanh, relu, concat-rows, scale."""
    if op in _UNARY:
        return _UNARY[op](a)
    if op in _BINARY:
        return _BINARY[op](a, b)
    if op == "scale":
        return scale(a, factor)
    if op == "concat-rows":
        return concat([a, b], axis=0)
    raise ContractError(f"unknown elementwise op {op!r}")


# -- differentiation --------------------------------------------------------


def _topo(root: Node) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into every reachable node's ``grad``."""
    if loss.shape != (1,):
        raise ContractError(f"backward: loss must have shape [1], got {list(loss.shape)}")
    if not loss.requires_grad:
        return
    loss._accum(np.ones(1))
    for node in reversed(_topo(loss)):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)


def zero_grad(nodes) -> None:
    for n in nodes:
        n.zero_grad()


def grad_check(f: Callable[..., Node], params: Sequence, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` receives one node per entry of ``params`` and must return a
    shape-[1] node.  The error per entry is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ContractError(f"grad_check: eps must lie in (0, 1e-2], got {eps}")
    base = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in params]
    leaves = [param(b) for b in base]
    out = f(*leaves)
    if out.shape != (1,):
        raise ContractError(f"grad_check: f must return shape [1], got {list(out.shape)}")
    backward(out)
    analytic = [leaf.grad.copy() for leaf in leaves]

    def evaluate(arrays):
        return float(f(*[constant(a) for a in arrays]).data[0])

    worst = 0.0
    for i, b in enumerate(base):
        for j in np.ndindex(b.shape):
            hi = [x.copy() for x in base]
            lo = [x.copy() for x in base]
            hi[i][j] += eps
            lo[i][j] -= eps
            numeric = (evaluate(hi) - evaluate(lo)) / (2.0 * eps)
            a = analytic[i][j]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
