"""Define-then-run expression graphs with reverse-mode differentiation.

Graphs are built from :func:`leaf` nodes and the op constructors below, then
evaluated against a ``{leaf name: ndarray}`` binding map.  Tensors are plain
numpy arrays; 64-bit floats are the default everywhere.

Example::

    x = leaf("x")
    w = leaf("w")
    loss = cross_entropy(matmul(x, w, transpose_b=True), leaf("y", frozen=True))
    g = gradient(ExprGraph(loss), {"x": xs, "w": ws, "y": ys}, ["w"])
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

KL_CLAMP = 1e-12


class AutodiffError(Exception):
    """Base class for graph construction and evaluation failures."""


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class FrozenLeafError(AutodiffError):
    pass


class BindingError(AutodiffError, KeyError):
    pass


class Node:
    """One operation record. Treat as immutable once created."""

    __slots__ = ("op", "inputs", "attrs", "name", "frozen")

    def __init__(self, op, inputs=(), attrs=None, name=None, frozen=False):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = dict(attrs or {})
        self.name = name
        self.frozen = frozen

    @property
    def is_leaf(self):
        return self.op == "leaf"

    def __repr__(self):
        if self.is_leaf:
            return f"Leaf({self.name!r}{', frozen' if self.frozen else ''})"
        return f"Node({self.op}, {len(self.inputs)} inputs)"


# --- constructors -----------------------------------------------------------


def leaf(name: str, frozen: bool = False) -> Node:
    """A named input. Frozen leaves never receive gradients."""
    return Node("leaf", name=name, frozen=frozen)


def matmul(a: Node, b: Node, transpose_b: bool = False) -> Node:
    """``a @ b`` (or ``a @ b.T``) for 2-D operands."""
    return Node("matmul", (a, b), {"transpose_b": transpose_b})


def conv2d(x: Node, w: Node, padding: str = "valid") -> Node:
    """Stride-1 cross-correlation of ``(B, C, H, W)`` with ``(O, C, K, K)``."""
    if padding not in ("valid", "same"):
        raise ValueError(f"unsupported padding {padding!r}")
    return Node("conv2d", (x, w), {"padding": padding})


def relu(x: Node) -> Node:
    return Node("relu", (x,))


def softmax(x: Node, axis: int = -1) -> Node:
    return Node("softmax", (x,), {"axis": axis})


def log(x: Node) -> Node:
    return Node("log", (x,))


def add(a: Node, b: Node, axis: int | None = None) -> Node:
    """Elementwise sum.

    With ``axis`` set, ``b`` is 1-D and is broadcast along that axis of ``a``
    (bias addition for dense ``axis=-1`` and conv ``axis=1`` layers).
    """
    return Node("add", (a, b), {"axis": axis})


def scale(x: Node, c) -> Node:
    """Multiply by a constant scalar or constant array broadcastable to ``x``."""
    return Node("scale", (x,), {"c": np.asarray(c, dtype=np.float64)})


def reduce_sum(x: Node, axis: int | None = None) -> Node:
    return Node("reduce_sum", (x,), {"axis": axis})


def flatten(x: Node) -> Node:
    """Collapse every axis after the leading batch axis."""
    return Node("flatten", (x,))


def kl_div(p: Node, q: Node, reduction: str = "mean") -> Node:
    """``KL(p || q)`` over the last axis for probability inputs.

    Both arguments are clamped below at 1e-12 inside the logarithm.
    ``reduction`` is ``mean`` (over rows), ``sum`` or ``none``.
    """
    _check_reduction(reduction)
    return Node("kl_div", (p, q), {"reduction": reduction})


def cross_entropy(logits: Node, labels: Node, reduction: str = "mean") -> Node:
    """Softmax cross-entropy of integer ``labels`` under ``logits``.

    The softmax is fused in, so ``logits`` are unnormalised scores.
    """
    _check_reduction(reduction)
    return Node("cross_entropy", (logits, labels), {"reduction": reduction})


def _check_reduction(reduction):
    if reduction not in ("mean", "sum", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")


# --- graph ------------------------------------------------------------------


class ExprGraph:
    """A rooted DAG in evaluation order."""

    def __init__(self, root: Node):
        self.root = root
        order: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Node, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in reversed(node.inputs):
                if id(child) not in seen:
                    stack.append((child, False))
        self.nodes: tuple[Node, ...] = tuple(order)
        leaves: dict[str, Node] = {}
        for node in self.nodes:
            if node.is_leaf:
                other = leaves.setdefault(node.name, node)
                if other is not node:
                    raise AutodiffError(f"two distinct leaves named {node.name!r}")
        self.leaves: Mapping[str, Node] = leaves

    @property
    def differentiable(self) -> list[str]:
        return [name for name, n in self.leaves.items() if not n.frozen]

    def __repr__(self):
        return f"ExprGraph({len(self.nodes)} nodes, leaves={list(self.leaves)})"


# --- op kernels ---------------------------------------------------------------
# forward(attrs, *values) -> value
# backward(attrs, g, out, values, needs) -> tuple of input grads (None if unneeded)


def _fwd_matmul(attrs, a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    bb = b.T if attrs["transpose_b"] else b
    if a.shape[1] != bb.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {bb.shape}")
    return a @ bb


def _bwd_matmul(attrs, g, out, values, needs):
    a, b = values
    da = db = None
    if attrs["transpose_b"]:
        if needs[0]:
            da = g @ b
        if needs[1]:
            db = g.T @ a
    else:
        if needs[0]:
            da = g @ b.T
        if needs[1]:
            db = a.T @ g
    return da, db


def _pad_amount(k, padding):
    if padding == "valid":
        return 0
    if k % 2 == 0:
        raise ShapeError("'same' padding needs an odd kernel size")
    return (k - 1) // 2


def _fwd_conv2d(attrs, x, w):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    k = w.shape[2]
    if w.shape[3] != k:
        raise ShapeError("conv2d kernels must be square")
    pad = _pad_amount(k, attrs["padding"])
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"conv2d kernel {k} larger than input {x.shape[2:]}")
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return np.einsum("bchwij,ocij->bohw", win, w, optimize=True)


def _bwd_conv2d(attrs, g, out, values, needs):
    x, w = values
    k = w.shape[2]
    pad = _pad_amount(k, attrs["padding"])
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    dx = dw = None
    if needs[1]:
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        dw = np.einsum("bchwij,bohw->ocij", win, g, optimize=True)
    if needs[0]:
        ho, wo = g.shape[2], g.shape[3]
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + ho, j : j + wo] += np.einsum("bohw,oc->bchw", g, w[:, :, i, j])
        dx = dxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else dxp
    return dx, dw


def _fwd_relu(attrs, x):
    return np.maximum(x, 0.0)


def _bwd_relu(attrs, g, out, values, needs):
    return (g * (values[0] > 0),)


def _fwd_softmax(attrs, x):
    z = x - x.max(axis=attrs["axis"], keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=attrs["axis"], keepdims=True)


def _bwd_softmax(attrs, g, out, values, needs):
    ax = attrs["axis"]
    return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)


def _fwd_log(attrs, x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(x)


def _bwd_log(attrs, g, out, values, needs):
    return (g / values[0],)


def _bias_shape(a, b, axis):
    if b.ndim != 1:
        raise ShapeError(f"broadcast operand must be 1-D, got {b.shape}")
    ax = axis % a.ndim
    if a.shape[ax] != b.shape[0]:
        raise ShapeError(f"cannot broadcast {b.shape} along axis {axis} of {a.shape}")
    shape = [1] * a.ndim
    shape[ax] = b.shape[0]
    return tuple(shape), ax


def _fwd_add(attrs, a, b):
    if attrs["axis"] is None:
        if a.shape != b.shape:
            raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
        return a + b
    shape, _ = _bias_shape(a, b, attrs["axis"])
    return a + b.reshape(shape)


def _bwd_add(attrs, g, out, values, needs):
    if attrs["axis"] is None:
        return g, g
    a, b = values
    _, ax = _bias_shape(a, b, attrs["axis"])
    other = tuple(i for i in range(a.ndim) if i != ax)
    return g, (g.sum(axis=other) if needs[1] else None)


def _fwd_scale(attrs, x):
    c = attrs["c"]
    if c.ndim and np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise ShapeError(f"scale constant {c.shape} does not broadcast to {x.shape}")
    return x * c


def _bwd_scale(attrs, g, out, values, needs):
    return (g * attrs["c"],)


def _fwd_reduce_sum(attrs, x):
    return np.asarray(x.sum(axis=attrs["axis"]))


def _bwd_reduce_sum(attrs, g, out, values, needs):
    x = values[0]
    if attrs["axis"] is None:
        return (np.broadcast_to(g, x.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, attrs["axis"]), x.shape).copy(),)


def _fwd_flatten(attrs, x):
    if x.ndim < 1:
        raise ShapeError("cannot flatten a scalar")
    return x.reshape(x.shape[0], -1)


def _bwd_flatten(attrs, g, out, values, needs):
    return (g.reshape(values[0].shape),)


def _reduce(per_row, reduction):
    if reduction == "none":
        return per_row
    if reduction == "sum":
        return np.asarray(per_row.sum())
    return np.asarray(per_row.mean())


def _row_grad_factor(g, per_row_shape, reduction):
    """Upstream gradient for each row, shaped to broadcast over the last axis."""
    if reduction == "none":
        return np.asarray(g)[..., None]
    n = int(np.prod(per_row_shape)) if per_row_shape else 1
    f = np.asarray(g) / n if reduction == "mean" else np.asarray(g)
    return np.broadcast_to(f, per_row_shape + (1,))


def _fwd_kl_div(attrs, p, q):
    if p.shape != q.shape:
        raise ShapeError(f"kl_div shape mismatch: {p.shape} vs {q.shape}")
    lp = np.log(np.maximum(p, KL_CLAMP))
    lq = np.log(np.maximum(q, KL_CLAMP))
    return _reduce((p * (lp - lq)).sum(axis=-1), attrs["reduction"])


def _bwd_kl_div(attrs, g, out, values, needs):
    p, q = values
    f = _row_grad_factor(g, p.shape[:-1], attrs["reduction"])
    dp = dq = None
    if needs[0]:
        lp = np.log(np.maximum(p, KL_CLAMP))
        lq = np.log(np.maximum(q, KL_CLAMP))
        dp = f * (lp - lq + (p > KL_CLAMP))
    if needs[1]:
        dq = f * np.where(q > KL_CLAMP, -p / np.maximum(q, KL_CLAMP), 0.0)
    return dp, dq


def _ce_parts(logits, labels):
    if logits.ndim not in (1, 2):
        raise ShapeError(f"cross_entropy logits must be 1-D or 2-D, got {logits.shape}")
    lab = np.asarray(labels)
    if lab.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {lab.shape} do not match logits {logits.shape}")
    idx = lab.astype(np.int64)
    if np.any(idx != lab) or np.any(idx < 0) or np.any(idx >= logits.shape[-1]):
        raise ShapeError("labels must be integer class indices within range")
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=-1, keepdims=True)
    probs = e / s
    lse = (m + np.log(s))[..., 0]
    picked = np.take_along_axis(logits, idx[..., None], axis=-1)[..., 0]
    return lse - picked, probs, idx


def _fwd_cross_entropy(attrs, logits, labels):
    per_row, _, _ = _ce_parts(logits, labels)
    return _reduce(per_row, attrs["reduction"])


def _bwd_cross_entropy(attrs, g, out, values, needs):
    logits, labels = values
    _, probs, idx = _ce_parts(logits, labels)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    f = _row_grad_factor(g, logits.shape[:-1], attrs["reduction"])
    return f * (probs - onehot), None


_KERNELS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_fwd_matmul, _bwd_matmul),
    "conv2d": (_fwd_conv2d, _bwd_conv2d),
    "relu": (_fwd_relu, _bwd_relu),
    "softmax": (_fwd_softmax, _bwd_softmax),
    "log": (_fwd_log, _bwd_log),
    "add": (_fwd_add, _bwd_add),
    "scale": (_fwd_scale, _bwd_scale),
    "reduce_sum": (_fwd_reduce_sum, _bwd_reduce_sum),
    "flatten": (_fwd_flatten, _bwd_flatten),
    "kl_div": (_fwd_kl_div, _bwd_kl_div),
    "cross_entropy": (_fwd_cross_entropy, _bwd_cross_entropy),
}

# Ops whose second operand is never differentiated.
_NONDIFF_INPUTS = {"cross_entropy": (1,)}


# --- evaluation ---------------------------------------------------------------


def _forward(graph: ExprGraph, bindings: Mapping[str, object]) -> dict[int, np.ndarray]:
    values: dict[int, np.ndarray] = {}
    for node in graph.nodes:
        if node.is_leaf:
            try:
                v = np.asarray(bindings[node.name])
            except KeyError:
                raise BindingError(f"no binding for leaf {node.name!r}") from None
            if v.dtype.kind == "f" and not np.all(np.isfinite(v)):
                raise NonFiniteError(f"leaf {node.name!r} holds non-finite values")
        else:
            fwd = _KERNELS[node.op][0]
            v = fwd(node.attrs, *(values[id(c)] for c in node.inputs))
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"{node.op} produced non-finite values")
        values[id(node)] = v
    return values


def evaluate(graph: ExprGraph, bindings: Mapping[str, object]) -> np.ndarray:
    """Value of the graph root under ``bindings``."""
    return _forward(graph, bindings)[id(graph.root)]


def gradient(
    graph: ExprGraph, bindings: Mapping[str, object], wrt: Iterable[str]
) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar root with respect to leaves ``wrt``."""
    return value_and_gradient(graph, bindings, wrt)[1]


def value_and_gradient(
    graph: ExprGraph, bindings: Mapping[str, object], wrt: Iterable[str]
) -> tuple[float, dict[str, np.ndarray]]:
    value, grads, _ = trace(graph, bindings, wrt)
    return value, grads


def trace(
    graph: ExprGraph,
    bindings: Mapping[str, object],
    wrt: Iterable[str],
    watch: Iterable[Node] = (),
) -> tuple[float, dict[str, np.ndarray], list[np.ndarray]]:
    """Root value, gradients for ``wrt``, and the forward values of ``watch`` nodes."""
    wrt = list(wrt)
    for name in wrt:
        node = graph.leaves.get(name)
        if node is not None and node.frozen:
            raise FrozenLeafError(f"leaf {name!r} is frozen")
    values = _forward(graph, bindings)
    root_val = values[id(graph.root)]
    if root_val.ndim != 0:
        raise ShapeError(f"gradient needs a scalar root, got shape {root_val.shape}")

    targets = {id(graph.leaves[n]) for n in wrt if n in graph.leaves}
    active: set[int] = set()
    for node in graph.nodes:
        if id(node) in targets or any(id(c) in active for c in node.inputs):
            active.add(id(node))

    grads: dict[int, np.ndarray] = {}
    if id(graph.root) in active:
        grads[id(graph.root)] = np.ones_like(root_val)
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None or node.is_leaf:
            continue
        skip = _NONDIFF_INPUTS.get(node.op, ())
        needs = tuple(id(c) in active and i not in skip for i, c in enumerate(node.inputs))
        if not any(needs):
            continue
        bwd = _KERNELS[node.op][1]
        in_grads = bwd(node.attrs, g, values[id(node)], [values[id(c)] for c in node.inputs], needs)
        for child, need, cg in zip(node.inputs, needs, in_grads):
            if not need:
                continue
            key = id(child)
            grads[key] = grads[key] + cg if key in grads else cg

    out = {}
    for name in wrt:
        node = graph.leaves.get(name)
        if node is not None and id(node) in grads:
            out[name] = np.asarray(grads[id(node)])
        else:
            out[name] = np.zeros(np.shape(bindings[name]), dtype=np.float64)
    return float(root_val), out, [values[id(n)] for n in watch]


def finite_diff_gradient(
    graph: ExprGraph, bindings: Mapping[str, object], wrt: Iterable[str], h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = {k: np.array(v, dtype=np.float64, copy=True) if np.asarray(v).dtype.kind == "f" else v
            for k, v in bindings.items()}
    out = {}
    for name in wrt:
        theta = base[name]
        g = np.zeros_like(theta)
        flat, gflat = theta.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(evaluate(graph, base))
            flat[i] = orig - h
            fm = float(evaluate(graph, base))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out
