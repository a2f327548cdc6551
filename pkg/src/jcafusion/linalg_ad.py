"""Dense float64 matrices with reverse-mode gradients.

Every value is a ``numpy.ndarray`` of dtype float64 whose last two axes are
(rows, cols).  An optional leading axis holds independent batch items; when a
2-D parameter is combined with a 3-D batch, its gradient is the ordered sum of
the per-item gradients (numpy's pairwise reduction over a fixed axis, so the
result is reproducible run to run).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, EvaluationError

__all__ = [
    "Node",
    "as_mat",
    "constant",
    "parameter",
    "matmul",
    "elementwise",
    "tanh",
    "relu",
    "add_const",
    "scale_const",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "add",
    "add_bias",
    "multiply_const",
    "transpose",
    "reshape",
    "backward",
    "finite_diff_check",
    "FiniteDiffReport",
]


def as_mat(x) -> np.ndarray:
    """Coerce ``x`` to a float64 array with at least two axes."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return arr


def _shape_str(arr: np.ndarray) -> str:
    return "x".join(str(s) for s in arr.shape)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out leading axes introduced by batching
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    """One vertex of the computation graph.

    ``value`` holds the forward result, ``grad`` the accumulated derivative of
    the final scalar with respect to ``value`` (zeros until :func:`backward`
    runs).  Leaves created by :func:`parameter` are the quantities one usually
    reads gradients from.
    """

    __slots__ = ("value", "op", "parents", "grad", "_backward", "name")

    def __init__(self, value, op: str = "leaf", parents: Sequence["Node"] = (),
                 backward_fn: Callable[[np.ndarray], None] | None = None,
                 name: str | None = None):
        self.value = as_mat(value)
        self.op = op
        self.parents = tuple(parents)
        self.grad = np.zeros_like(self.value)
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[-2]

    @property
    def cols(self) -> int:
        return self.value.shape[-1]

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 value, got {_shape_str(self.value)}")
        return float(self.value.reshape(-1)[0])

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    @property
    def T(self) -> "Node":
        return transpose(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.value.shape})"


def constant(x, name: str | None = None) -> Node:
    return Node(x, "const", name=name)


def parameter(x, name: str | None = None) -> Node:
    return Node(x, "param", name=name)


def _accumulate(node: Node, g: np.ndarray) -> None:
    node.grad = node.grad + _unbroadcast(g, node.value.shape)


def matmul(a: Node, b: Node) -> Node:
    if a.cols != b.rows:
        raise DimensionError(
            f"matmul: cannot multiply {_shape_str(a.value)} by {_shape_str(b.value)}"
        )
    av, bv = a.value, b.value
    out = Node(np.matmul(av, bv), "matmul", (a, b))

    def _bw(g):
        _accumulate(a, np.matmul(g, np.swapaxes(bv, -1, -2)))
        _accumulate(b, np.matmul(np.swapaxes(av, -1, -2), g))

    out._backward = _bw
    return out


def elementwise(a: Node, kind: str, c: float = 0.0) -> Node:
    """Apply ``tanh``, ``relu``, ``add_const`` or ``scale_const`` entrywise."""
    x = a.value
    if kind == "tanh":
        y = np.tanh(x)
        local = lambda g: g * (1.0 - y * y)  # noqa: E731
    elif kind == "relu":
        mask = x > 0.0  # subgradient 0 at exactly 0
        y = np.where(mask, x, 0.0)
        local = lambda g: g * mask  # noqa: E731
    elif kind == "add_const":
        y = x + c
        local = lambda g: g  # noqa: E731
    elif kind == "scale_const":
        y = x * c
        local = lambda g: g * c  # noqa: E731
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    out = Node(y, kind, (a,))
    out._backward = lambda g: _accumulate(a, local(g))
    return out


def tanh(a: Node) -> Node:
    return elementwise(a, "tanh")


def relu(a: Node) -> Node:
    return elementwise(a, "relu")


def add_const(a: Node, c: float) -> Node:
    return elementwise(a, "add_const", c)


def scale_const(a: Node, c: float) -> Node:
    return elementwise(a, "scale_const", c)


def concat_cols(a: Node, b: Node) -> Node:
    if a.rows != b.rows:
        raise DimensionError(
            f"concat_cols: row mismatch {_shape_str(a.value)} vs {_shape_str(b.value)}"
        )
    lead = np.broadcast_shapes(a.value.shape[:-2], b.value.shape[:-2])
    av = np.broadcast_to(a.value, lead + a.value.shape[-2:])
    bv = np.broadcast_to(b.value, lead + b.value.shape[-2:])
    seam = a.cols
    out = Node(np.concatenate([av, bv], axis=-1), "concat_cols", (a, b))

    def _bw(g):
        _accumulate(a, g[..., :seam])
        _accumulate(b, g[..., seam:])

    out._backward = _bw
    return out


def concat_rows(a: Node, b: Node) -> Node:
    if a.cols != b.cols:
        raise DimensionError(
            f"concat_rows: column mismatch {_shape_str(a.value)} vs {_shape_str(b.value)}"
        )
    seam = a.rows
    out = Node(np.concatenate([a.value, b.value], axis=-2), "concat_rows", (a, b))

    def _bw(g):
        _accumulate(a, g[..., :seam, :])
        _accumulate(b, g[..., seam:, :])

    out._backward = _bw
    return out


def slice_cols(a: Node, start: int, stop: int) -> Node:
    if not 0 <= start < stop <= a.cols:
        raise DimensionError(f"slice_cols: [{start}, {stop}) outside 0..{a.cols}")
    out = Node(a.value[..., start:stop].copy(), "slice_cols", (a,))

    def _bw(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        _accumulate(a, full)

    out._backward = _bw
    return out


def add(a: Node, b: Node) -> Node:
    if a.value.shape[-2:] != b.value.shape[-2:]:
        raise DimensionError(
            f"add: shape mismatch {_shape_str(a.value)} vs {_shape_str(b.value)}"
        )
    out = Node(a.value + b.value, "add", (a, b))

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    out._backward = _bw
    return out


def add_bias(a: Node, bias: Node) -> Node:
    """Add a 1 x cols row vector to every row of ``a``."""
    if bias.rows != 1 or bias.cols != a.cols:
        raise DimensionError(
            f"add_bias: bias {_shape_str(bias.value)} does not fit {_shape_str(a.value)}"
        )
    out = Node(a.value + bias.value, "add_bias", (a, bias))

    def _bw(g):
        _accumulate(a, g)
        _accumulate(bias, g)

    out._backward = _bw
    return out


def multiply_const(a: Node, mask: np.ndarray) -> Node:
    """Entrywise product with a fixed array (dropout masks)."""
    mask = np.asarray(mask, dtype=np.float64)
    out = Node(a.value * mask, "multiply_const", (a,))
    out._backward = lambda g: _accumulate(a, g * mask)
    return out


def transpose(a: Node) -> Node:
    out = Node(np.swapaxes(a.value, -1, -2).copy(), "transpose", (a,))
    out._backward = lambda g: _accumulate(a, np.swapaxes(g, -1, -2))
    return out


def reshape(a: Node, shape: tuple) -> Node:
    out = Node(a.value.reshape(shape).copy(), "reshape", (a,))
    out._backward = lambda g: _accumulate(a, g.reshape(a.value.shape))
    return out


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if i < len(node.parents):
            stack.append((node, i + 1))
            parent = node.parents[i]
            if id(parent) not in seen:
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def backward(root: Node) -> None:
    """Propagate d(root)/d(node) into ``grad`` of every ancestor of ``root``.

    ``root`` must hold a single scalar.  Gradients accumulate, so call
    ``zero_grad`` on reused leaves between passes.
    """
    if root.value.size != 1:
        raise DimensionError(f"backward needs a scalar root, got {_shape_str(root.value)}")
    order = _topological_order(root)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_param: int
    worst_index: tuple
    analytic: float
    numeric: float
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def finite_diff_check(f: Callable[[], Node], params: Sequence[Node], h: float = 1e-5) -> FiniteDiffReport:
    """Compare reverse-mode gradients against central differences.

    ``f`` rebuilds the scalar graph from the current ``params`` values on
    every call; each parameter entry is perturbed in place by ``±h``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params:
        p.zero_grad()
    root = f()
    if not np.all(np.isfinite(root.value)):
        raise EvaluationError("objective is not finite at the base point")
    backward(root)
    analytic = [p.grad.copy() for p in params]

    worst = FiniteDiffReport(0.0, -1, (), 0.0, 0.0, 0)
    n = 0
    for pi, p in enumerate(params):
        it = np.nditer(p.value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.value[idx]
            p.value[idx] = orig + h
            fp = f().item()
            p.value[idx] = orig - h
            fm = f().item()
            p.value[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"objective not finite when perturbing param {pi} at {idx}")
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[pi][idx])
            rel = abs(ana - num) / (abs(ana) + abs(num) + 1e-12)
            n += 1
            if rel > worst.max_rel_error or worst.worst_param < 0:
                worst = FiniteDiffReport(rel, pi, idx, ana, num, 0)
    worst.n_checked = n
    return worst
