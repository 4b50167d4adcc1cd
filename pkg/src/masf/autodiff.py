"""Reverse-mode automatic differentiation over dense float64 tensors.

The graph is built eagerly: every node computes its value at construction
time, so shape errors surface where the offending op is written. Gradients
are built lazily by :func:`grad`, and the returned gradients are themselves
graph nodes, so differentiating an expression that contains gradients gives
correct second-order derivatives. This is the mechanism that lets a
meta-loss evaluated at inner-updated parameters be backpropagated to the
original parameters.

Numerical conventions:
  * everything is float64,
  * ``log`` and ``div`` are guarded with an additive epsilon of 1e-12,
  * softmax-style ops go through log-sum-exp with max subtraction.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-12

_ids = itertools.count()


class DomainError(ArithmeticError):
    """A guarded op received a value outside its domain beyond epsilon repair."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


class Expr:
    """One node of the computation graph (immutable after construction)."""

    __slots__ = ("id", "op", "inputs", "attrs", "value")

    def __init__(self, op: str, inputs: tuple["Expr", ...], value: np.ndarray,
                 attrs: dict | None = None):
        self.id = next(_ids)
        self.op = op
        self.inputs = inputs
        self.attrs = attrs or {}
        self.value = _freeze(value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Expr(id={self.id}, op={self.op!r}, shape={self.shape})"

    # arithmetic sugar; scalars/arrays on either side are lifted to constants
    def __add__(self, other):
        return add(self, as_expr(other))

    def __radd__(self, other):
        return add(as_expr(other), self)

    def __sub__(self, other):
        return sub(self, as_expr(other))

    def __rsub__(self, other):
        return sub(as_expr(other), self)

    def __mul__(self, other):
        return mul(self, as_expr(other))

    def __rmul__(self, other):
        return mul(as_expr(other), self)

    def __truediv__(self, other):
        return div(self, as_expr(other))

    def __rtruediv__(self, other):
        return div(as_expr(other), self)

    def __neg__(self):
        return neg(self)


def leaf(value) -> Expr:
    """Differentiable input node (parameters, data). Copies its argument."""
    return Expr("leaf", (), np.array(value, dtype=np.float64))


def const(value) -> Expr:
    """Non-differentiable node (masks, selectors, hyperparameter scalars)."""
    return Expr("const", (), np.array(value, dtype=np.float64))


def as_expr(x) -> Expr:
    return x if isinstance(x, Expr) else const(x)


def evaluate(expr: Expr) -> np.ndarray:
    """Value of a node. Values are computed eagerly, so this is a lookup."""
    return expr.value


# ---------------------------------------------------------------------------
# forward semantics


def _sum_to_value(val: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``val`` back to ``shape``, undoing numpy broadcasting."""
    if val.shape == shape:
        return val
    extra = val.ndim - len(shape)
    if extra:
        val = val.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and val.shape[i] != 1)
    if axes:
        val = val.sum(axis=axes, keepdims=True)
    return val.reshape(shape)


def _fwd_div(attrs, a, b):
    d = b + EPS
    if np.any(d == 0.0):
        raise DomainError("division by zero not repaired by epsilon guard")
    return a / d


def _fwd_log(attrs, a):
    g = a + EPS
    if np.any(g <= 0.0):
        raise DomainError("log of non-positive value")
    return np.log(g)


def _fwd_sqrt(attrs, a):
    if np.any(a < 0.0):
        raise DomainError("sqrt of negative value")
    return np.sqrt(a)


def _fwd_scatter_rows(attrs, a):
    n = a.shape[0]
    out = np.zeros((n, attrs["ncols"]))
    out[np.arange(n), attrs["idx"]] = a
    return out


_FORWARD: dict[str, Callable] = {
    "add": lambda attrs, a, b: a + b,
    "sub": lambda attrs, a, b: a - b,
    "mul": lambda attrs, a, b: a * b,
    "div": _fwd_div,
    "neg": lambda attrs, a: -a,
    "matmul": lambda attrs, a, b: a @ b,
    "transpose": lambda attrs, a: a.T,
    "relu": lambda attrs, a: np.maximum(a, 0.0),
    "exp": lambda attrs, a: np.exp(a),
    "log": _fwd_log,
    "sqrt": _fwd_sqrt,
    "square": lambda attrs, a: a * a,
    "sum": lambda attrs, a: np.asarray(a.sum(axis=attrs["axis"])),
    "sum_to": lambda attrs, a: _sum_to_value(a, attrs["shape"]),
    "broadcast": lambda attrs, a: np.broadcast_to(a, attrs["shape"]),
    "reshape": lambda attrs, a: a.reshape(attrs["shape"]),
    "gather_rows": lambda attrs, a: a[np.arange(a.shape[0]), attrs["idx"]],
    "scatter_rows": _fwd_scatter_rows,
}


def _make(op: str, inputs: tuple[Expr, ...], attrs: dict | None = None) -> Expr:
    attrs = attrs or {}
    value = _FORWARD[op](attrs, *(x.value for x in inputs))
    return Expr(op, inputs, value, attrs)


def _check_broadcast(a: Expr, b: Expr, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# elementwise ops (numpy broadcasting allowed)

def add(a: Expr, b: Expr) -> Expr:
    _check_broadcast(a, b, "add")
    return _make("add", (a, b))


def sub(a: Expr, b: Expr) -> Expr:
    _check_broadcast(a, b, "sub")
    return _make("sub", (a, b))


def mul(a: Expr, b: Expr) -> Expr:
    _check_broadcast(a, b, "mul")
    return _make("mul", (a, b))


def div(a: Expr, b: Expr) -> Expr:
    """Epsilon-guarded division: a / (b + 1e-12)."""
    _check_broadcast(a, b, "div")
    return _make("div", (a, b))


def neg(a: Expr) -> Expr:
    return _make("neg", (a,))


def relu(a: Expr) -> Expr:
    return _make("relu", (a,))


def exp(a: Expr) -> Expr:
    return _make("exp", (a,))


def log(a: Expr) -> Expr:
    """Epsilon-guarded natural log: log(a + 1e-12)."""
    return _make("log", (a,))


def sqrt(a: Expr) -> Expr:
    return _make("sqrt", (a,))


def square(a: Expr) -> Expr:
    return _make("square", (a,))


def matmul(a: Expr, b: Expr) -> Expr:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make("matmul", (a, b))


def transpose(a: Expr) -> Expr:
    if a.value.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _make("transpose", (a,))


def reduce_sum(a: Expr, axis: int | None = None) -> Expr:
    return _make("sum", (a,), {"axis": axis})


def sum_to(a: Expr, shape: Sequence[int]) -> Expr:
    shape = tuple(shape)
    np.broadcast_shapes(a.shape, shape)  # raises on incompatibility
    return _make("sum_to", (a,), {"shape": shape})


def broadcast_to(a: Expr, shape: Sequence[int]) -> Expr:
    return _make("broadcast", (a,), {"shape": tuple(shape)})


def reshape(a: Expr, shape: Sequence[int]) -> Expr:
    return _make("reshape", (a,), {"shape": tuple(shape)})


def gather_rows(a: Expr, idx: np.ndarray) -> Expr:
    """Pick a[i, idx[i]] for every row i."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.value.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ValueError("gather_rows expects a [N, C] tensor and N indices")
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= a.shape[1]:
        raise ValueError("gather_rows: index out of range")
    return _make("gather_rows", (a,), {"idx": idx})


def scatter_rows(a: Expr, idx: np.ndarray, ncols: int) -> Expr:
    """Inverse of gather_rows: place a[i] at position (i, idx[i]) in zeros."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.value.ndim != 1 or idx.shape != a.shape:
        raise ValueError("scatter_rows expects a vector and matching indices")
    return _make("scatter_rows", (a,), {"idx": idx, "ncols": int(ncols)})


# composites

def mean(a: Expr, axis: int | None = None) -> Expr:
    n = a.value.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis), const(1.0 / n))


def log_sum_exp(a: Expr, axis: int | None = None) -> Expr:
    """Stable log-sum-exp; the subtracted max is a constant, which leaves
    both the value and the derivatives exact."""
    if axis is None:
        m = const(a.value.max())
        return add(log(reduce_sum(exp(sub(a, m)))), m)
    m_val = a.value.max(axis=axis, keepdims=True)
    s = reduce_sum(exp(sub(a, const(m_val))), axis=axis)
    return add(log(s), const(np.squeeze(m_val, axis=axis)))


def log_softmax(a: Expr, axis: int = -1) -> Expr:
    if a.value.ndim != 2 or axis not in (1, -1):
        raise ValueError("log_softmax expects a [N, C] tensor, axis=1")
    lse = log_sum_exp(a, axis=1)
    return sub(a, reshape(lse, (a.shape[0], 1)))


def softmax(a: Expr, axis: int = -1) -> Expr:
    return exp(log_softmax(a, axis))


def concat_rows(parts: Sequence[Expr]) -> Expr:
    """Stack [Ni, d] tensors vertically via constant selectors (differentiable)."""
    total = sum(p.shape[0] for p in parts)
    out = None
    offset = 0
    for p in parts:
        sel = np.zeros((total, p.shape[0]))
        sel[offset:offset + p.shape[0]] = np.eye(p.shape[0])
        term = matmul(const(sel), p)
        out = term if out is None else add(out, term)
        offset += p.shape[0]
    return out


def select_rows(a: Expr, idx: np.ndarray) -> Expr:
    """Rows a[idx] as a differentiable op (constant selector matmul)."""
    idx = np.asarray(idx, dtype=np.int64)
    sel = np.zeros((idx.shape[0], a.shape[0]))
    sel[np.arange(idx.shape[0]), idx] = 1.0
    return matmul(const(sel), a)


# ---------------------------------------------------------------------------
# reverse pass


def _vjp_add(node, g):
    a, b = node.inputs
    return (sum_to(g, a.shape), sum_to(g, b.shape))


def _vjp_sub(node, g):
    a, b = node.inputs
    return (sum_to(g, a.shape), sum_to(neg(g), b.shape))


def _vjp_mul(node, g):
    a, b = node.inputs
    return (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape))


def _vjp_div(node, g):
    a, b = node.inputs
    # node = a/(b+eps); d/da = 1/(b+eps), d/db = -node/(b+eps)
    return (sum_to(div(g, b), a.shape),
            sum_to(neg(mul(g, div(node, b))), b.shape))


def _vjp_matmul(node, g):
    a, b = node.inputs
    return (matmul(g, transpose(b)), matmul(transpose(a), g))


def _vjp_sum(node, g):
    (a,) = node.inputs
    axis = node.attrs["axis"]
    if axis is None:
        return (broadcast_to(g, a.shape),)
    keep = list(a.shape)
    keep[axis] = 1
    return (broadcast_to(reshape(g, keep), a.shape),)


def _vjp_relu(node, g):
    (a,) = node.inputs
    return (mul(g, const((a.value > 0).astype(np.float64))),)


_VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": lambda node, g: (neg(g),),
    "matmul": _vjp_matmul,
    "transpose": lambda node, g: (transpose(g),),
    "relu": _vjp_relu,
    "exp": lambda node, g: (mul(g, node),),
    "log": lambda node, g: (div(g, node.inputs[0]),),
    "sqrt": lambda node, g: (div(mul(g, const(0.5)), node),),
    "square": lambda node, g: (mul(g, mul(const(2.0), node.inputs[0])),),
    "sum": _vjp_sum,
    "sum_to": lambda node, g: (broadcast_to(g, node.inputs[0].shape),),
    "broadcast": lambda node, g: (sum_to(g, node.inputs[0].shape),),
    "reshape": lambda node, g: (reshape(g, node.inputs[0].shape),),
    "gather_rows": lambda node, g: (
        scatter_rows(g, node.attrs["idx"], node.inputs[0].shape[1]),),
    "scatter_rows": lambda node, g: (gather_rows(g, node.attrs["idx"]),),
}


def _toposort(root: Expr) -> list[Expr]:
    order: list[Expr] = []
    seen: set[int] = set()
    stack: list[tuple[Expr, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for child in node.inputs:
            if child.id not in seen:
                stack.append((child, False))
    return order  # children before parents


class GradMap:
    """Gradients of one scalar with respect to a set of leaf parameters.

    Entries are Expr nodes, so they can be differentiated again.
    """

    def __init__(self, params: Sequence[Expr], grads: Sequence[Expr]):
        self.params = tuple(params)
        self.grads = tuple(grads)
        self._by_id = {p.id: g for p, g in zip(self.params, self.grads)}

    def __getitem__(self, param: Expr) -> Expr:
        return self._by_id[param.id]

    def __contains__(self, param: Expr) -> bool:
        return param.id in self._by_id

    def __iter__(self):
        return iter(zip(self.params, self.grads))

    def __len__(self):
        return len(self.params)


def grad(scalar: Expr, params: Sequence[Expr]) -> GradMap:
    """Gradient of a scalar node with respect to leaf parameters.

    Parameters not reachable from ``scalar`` get zero gradients. The result
    entries are graph nodes built from differentiable ops, so ``grad`` of an
    expression containing them yields second-order derivatives.
    """
    if scalar.shape != ():
        raise ValueError(f"grad root must be scalar, got shape {scalar.shape}")
    for p in params:
        if p.op != "leaf":
            raise ValueError("grad parameters must be leaf nodes")

    order = _toposort(scalar)
    param_ids = {p.id for p in params}

    # restrict the sweep to nodes from which some parameter is reachable
    needed: set[int] = set()
    for node in order:  # children first
        if node.id in param_ids or any(c.id in needed for c in node.inputs):
            needed.add(node.id)

    adjoints: dict[int, Expr] = {scalar.id: const(1.0)}
    for node in reversed(order):
        g = adjoints.get(node.id)
        if g is None or node.op in ("leaf", "const"):
            continue
        for inp, gi in zip(node.inputs, _VJP[node.op](node, g)):
            if gi is None or inp.id not in needed:
                continue
            prev = adjoints.get(inp.id)
            adjoints[inp.id] = gi if prev is None else add(prev, gi)

    grads = [adjoints[p.id] if p.id in adjoints else const(np.zeros(p.shape))
             for p in params]
    return GradMap(params, grads)


# ---------------------------------------------------------------------------
# gradient clipping


def global_norm(grads: GradMap) -> Expr:
    total = None
    for _, g in grads:
        term = reduce_sum(square(g))
        total = term if total is None else add(total, term)
    return sqrt(total)


def clip_by_norm(grads: GradMap, threshold: float) -> GradMap:
    """Scale the whole GradMap so its global L2 norm is at most ``threshold``.

    The branch is decided eagerly on the current value; when scaling is
    active, the scale factor stays differentiable through the norm.
    """
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if float(norm.value) <= threshold:
        return grads
    scale = div(const(threshold), norm)
    return GradMap(grads.params, [mul(g, scale) for _, g in grads])


# ---------------------------------------------------------------------------
# finite differences (test oracle)


def recompute(root: Expr, overrides: dict[int, np.ndarray]) -> np.ndarray:
    """Re-evaluate a graph with some leaf values replaced (non-mutating).

    Data-dependent constants baked in at construction (relu masks, clip
    branches, log-sum-exp shifts) are kept fixed, matching the local,
    almost-everywhere semantics of the gradients.
    """
    values: dict[int, np.ndarray] = {}
    for node in _toposort(root):
        if node.op in ("leaf", "const"):
            values[node.id] = overrides.get(node.id, node.value)
        else:
            values[node.id] = _FORWARD[node.op](
                node.attrs, *(values[c.id] for c in node.inputs))
    return values[root.id]


def finite_diff_check(scalar: Expr, params: Sequence[Expr],
                      h: float = 1e-5) -> float:
    """Max relative error between grad() and central finite differences.

    Relative error is |a - b| / max(1, |a|, |b|), maximized over every
    component of every parameter.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    gm = grad(scalar, params)
    worst = 0.0
    for p, g in gm:
        analytic = g.value
        base = np.array(p.value)
        numeric = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            plus = np.array(base)
            plus[ix] += h
            minus = np.array(base)
            minus[ix] -= h
            fp = recompute(scalar, {p.id: plus})
            fm = recompute(scalar, {p.id: minus})
            numeric[ix] = (float(fp) - float(fm)) / (2.0 * h)
            it.iternext()
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        err = np.abs(analytic - numeric) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
