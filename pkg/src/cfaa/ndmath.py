"""Dense float64 matrices with a small replayable reverse-mode tape.

Every value on the tape is a 2-D ``float64`` array.  A :class:`Node` records
the primitive that produced it, so a finished graph can be re-evaluated with
perturbed leaves (see :func:`grad_check`).  Quantities that the training
objective treats as frozen (transport plans, assignment matrices, spectral
masks) enter the graph as constants and stay fixed on replay.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "DomainError",
    "Node",
    "EigPair",
    "as_matrix",
    "constant",
    "param",
    "primitive",
    "backward",
    "replay",
    "grad_check",
    "sym_eig",
    "psd_function",
    "matmul",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "scale",
    "transpose",
    "inverse",
    "trace",
    "total",
    "row_sum",
    "col_sum",
    "diag_part",
    "diag_embed",
    "row_softmax",
    "sigmoid",
    "log",
    "tanh",
    "absolute",
    "square",
    "clip",
    "take_rows",
    "hconcat",
    "eig_values",
    "eig_vectors",
    "psd_fn",
]

EIGEN_GAP_FLOOR = 1e-6
PINV_RTOL = 1e-8


class NonFiniteError(ValueError):
    """Raised when a matrix would contain NaN or Inf."""


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array (scalars become 1x1)."""
    a = np.array(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected rank <= 2, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise NonFiniteError("matrix contains NaN or Inf")
    return a


class Node:
    """A value on the tape.

    ``forward`` maps parent values to this node's value and ``vjp`` maps
    ``(upstream, parent values, own value)`` to one gradient per parent.
    Leaves have neither.
    """

    __slots__ = ("value", "parents", "forward", "vjp", "op", "requires_grad", "grad")

    def __init__(self, value, parents=(), forward=None, vjp=None, op="leaf",
                 requires_grad=False):
        self.value = as_matrix(value)
        self.parents = tuple(parents)
        self.forward = forward
        self.vjp = vjp
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def constant(x) -> Node:
    """A leaf that never receives a gradient."""
    if isinstance(x, Node):
        return Node(x.value.copy())
    return Node(x)


def param(x) -> Node:
    """A leaf that receives a gradient."""
    if isinstance(x, Node):
        x = x.value
    return Node(np.array(x, dtype=np.float64, copy=True), requires_grad=True)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def primitive(op: str, forward: Callable, vjp: Callable, *parents) -> Node:
    """Apply a primitive to ``parents`` and record it on the tape."""
    parents = tuple(_lift(p) for p in parents)
    value = forward(*[p.value for p in parents])
    return Node(value, parents, forward, vjp, op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _topo(root: Node) -> list[Node]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Populate ``.grad`` on every node reachable from a scalar ``root``.

    Nodes that do not influence the root keep a zero gradient.
    """
    if root.value.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar root, got {root.value.shape}")
    order = _topo(root)
    for node in order:
        node.grad = np.zeros_like(node.value) if node.requires_grad else None
    root.grad = np.ones((1, 1))
    for node in reversed(order):
        if node.vjp is None or not node.requires_grad:
            continue
        grads = node.vjp(node.grad, *[p.value for p in node.parents], node.value)
        for p, g in zip(node.parents, grads):
            if p.requires_grad and g is not None:
                p.grad = p.grad + _unbroadcast(np.asarray(g, dtype=np.float64), p.value.shape)


def replay(root: Node, overrides: dict[int, np.ndarray] | None = None) -> np.ndarray:
    """Re-evaluate the graph under ``root`` without touching stored values.

    ``overrides`` maps ``id(leaf)`` to a replacement value.
    """
    overrides = overrides or {}
    values: dict[int, np.ndarray] = {}
    for node in _topo(root):
        if node.forward is None:
            values[id(node)] = overrides.get(id(node), node.value)
        else:
            values[id(node)] = node.forward(*[values[id(p)] for p in node.parents])
    return values[id(root)]


def grad_check(root: Node, params: Sequence[Node], h: float = 1e-5) -> float:
    """Largest relative gap between tape gradients and central differences.

    The error for each entry is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if root.value.shape != (1, 1):
        raise ShapeError("grad_check needs a scalar-valued root")
    if h <= 0:
        raise ValueError("step h must be positive")
    backward(root)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        base = p.value
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += h
            minus = base.copy()
            minus[idx] -= h
            fp = replay(root, {id(p): plus})[0, 0]
            fm = replay(root, {id(p): minus})[0, 0]
            numeric = (fp - fm) / (2 * h)
            a = analytic[idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# --------------------------------------------------------------------------
# eigen machinery


class EigPair:
    """Ascending eigenvalues and orthonormal eigenvectors of a symmetric matrix."""

    def __init__(self, eigenvalues: np.ndarray, eigenvectors: np.ndarray):
        self.eigenvalues = eigenvalues
        self.eigenvectors = eigenvectors

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T

    def __iter__(self):
        yield self.eigenvalues
        yield self.eigenvectors


def _eigh(s: np.ndarray):
    s = 0.5 * (s + s.T)
    w, v = np.linalg.eigh(s)
    # sign convention: largest-magnitude entry of every eigenvector is positive
    pivot = np.abs(v).argmax(axis=0)
    signs = np.sign(v[pivot, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return w, v * signs


def sym_eig(s) -> EigPair:
    """Eigendecomposition of a symmetric matrix, symmetrized first."""
    s = as_matrix(s)
    if s.shape[0] != s.shape[1]:
        raise ShapeError(f"sym_eig needs a square matrix, got {s.shape}")
    w, v = _eigh(s)
    return EigPair(w, v)


def _gap_inverse(w: np.ndarray) -> np.ndarray:
    # F_ij = 1 / (w_j - w_i), magnitude of the gap floored at EIGEN_GAP_FLOOR
    gap = w[None, :] - w[:, None]
    sign = np.where(gap >= 0, 1.0, -1.0)
    gap = sign * np.maximum(np.abs(gap), EIGEN_GAP_FLOOR)
    f = 1.0 / gap
    np.fill_diagonal(f, 0.0)
    return f


def _sym(g: np.ndarray) -> np.ndarray:
    return 0.5 * (g + g.T)


def eig_values(s) -> Node:
    """Eigenvalues of ``s`` as a 1xD row node."""
    def fwd(a):
        return _eigh(a)[0][None, :]

    def vjp(g, a, out):
        _, v = _eigh(a)
        return (_sym((v * g[0]) @ v.T),)

    return primitive("eig_values", fwd, vjp, s)


def eig_vectors(s) -> Node:
    """Eigenvectors of ``s`` (columns, ascending eigenvalue order)."""
    def fwd(a):
        return _eigh(a)[1]

    def vjp(g, a, v):
        w, _ = _eigh(a)
        inner = _gap_inverse(w) * (v.T @ g)
        return (_sym(v @ inner @ v.T),)

    return primitive("eig_vectors", fwd, vjp, s)


_FUNCS = {
    "sqrt": (np.sqrt, lambda x: 0.5 / np.sqrt(x)),
    "pinv": (lambda x: 1.0 / x, lambda x: -1.0 / x**2),
    "pinv_sqrt": (lambda x: 1.0 / np.sqrt(x), lambda x: -0.5 * x**-1.5),
}


def _spectral(a: np.ndarray, f: str, tol: float):
    w, v = _eigh(a)
    scale = np.abs(w).max() if w.size else 0.0
    thr = tol * scale
    if f == "sqrt" and (w < -max(thr, tol)).any():
        raise DomainError(f"sqrt of a matrix with eigenvalue {w.min():.3e} < 0")
    wc = np.maximum(w, 0.0)
    keep = wc > thr
    fn, dfn = _FUNCS[f]
    fw = np.zeros_like(wc)
    dfw = np.zeros_like(wc)
    fw[keep] = fn(wc[keep])
    dfw[keep] = dfn(wc[keep])
    return wc, v, fw, dfw, keep


def _divided_differences(w, fw, dfw, keep):
    dw = w[:, None] - w[None, :]
    df = fw[:, None] - fw[None, :]
    scale = max(np.abs(w).max(), 1e-300)
    close = np.abs(dw) <= 1e-9 * scale
    k = np.where(close, 0.0, df / np.where(close, 1.0, dw))
    avg = 0.5 * (dfw[:, None] + dfw[None, :])
    both = keep[:, None] & keep[None, :]
    return np.where(close, np.where(both, avg, 0.0), k)


def psd_function(s, f: str, tol: float = PINV_RTOL) -> np.ndarray:
    """Apply ``sqrt``, ``pinv`` or ``pinv_sqrt`` to a symmetric PSD matrix.

    Eigenvalues are clamped at zero; those at or below ``tol`` times the
    largest eigenvalue magnitude map to zero.  ``sqrt`` rejects eigenvalues
    more negative than that threshold.
    """
    if f not in _FUNCS:
        raise ValueError(f"unknown spectral function {f!r}")
    s = as_matrix(s)
    _, v, fw, _, _ = _spectral(s, f, tol)
    return (v * fw) @ v.T


def psd_fn(s, f: str, tol: float = PINV_RTOL) -> Node:
    """Tape version of :func:`psd_function`.

    The keep-mask of the spectrum is frozen at the first evaluation, so
    replays and gradients treat it as a constant.  The backward pass uses
    divided differences of ``f`` over eigenvalue pairs, which stays finite
    on repeated eigenvalues.
    """
    if f not in _FUNCS:
        raise ValueError(f"unknown spectral function {f!r}")
    s = _lift(s)
    frozen = {}

    def eval_(a):
        wc, v, fw, dfw, keep = _spectral(a, f, tol)
        if "keep" not in frozen:
            frozen["keep"] = keep
        keep = frozen["keep"]
        fn, dfn = _FUNCS[f]
        fw = np.zeros_like(wc)
        dfw = np.zeros_like(wc)
        fw[keep] = fn(np.maximum(wc[keep], 1e-300))
        dfw[keep] = dfn(np.maximum(wc[keep], 1e-300))
        return wc, v, fw, dfw, keep

    def fwd(a):
        _, v, fw, _, _ = eval_(a)
        return (v * fw) @ v.T

    def vjp(g, a, out):
        wc, v, fw, dfw, keep = eval_(a)
        k = _divided_differences(wc, fw, dfw, keep)
        inner = k * (v.T @ _sym(g) @ v)
        return (_sym(v @ inner @ v.T),)

    return primitive(f"psd_{f}", fwd, vjp, s)


# --------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Node:
    return primitive("matmul", lambda x, y: x @ y,
                     lambda g, x, y, o: (g @ y.T, x.T @ g), a, b)


def add(a, b) -> Node:
    return primitive("add", lambda x, y: x + y, lambda g, x, y, o: (g, g), a, b)


def sub(a, b) -> Node:
    return primitive("sub", lambda x, y: x - y, lambda g, x, y, o: (g, -g), a, b)


def neg(a) -> Node:
    return primitive("neg", lambda x: -x, lambda g, x, o: (-g,), a)


def mul(a, b) -> Node:
    """Elementwise product with row/column broadcasting."""
    return primitive("mul", lambda x, y: x * y,
                     lambda g, x, y, o: (g * y, g * x), a, b)


def div(a, b) -> Node:
    return primitive("div", lambda x, y: x / y,
                     lambda g, x, y, o: (g / y, -g * x / y**2), a, b)


def scale(a, c: float) -> Node:
    c = float(c)
    return primitive("scale", lambda x: c * x, lambda g, x, o: (c * g,), a)


def transpose(a) -> Node:
    return primitive("transpose", lambda x: x.T.copy(), lambda g, x, o: (g.T,), a)


def inverse(a) -> Node:
    """Matrix inverse; the adjoint is ``-inv^T g inv^T``."""
    return primitive("inverse", np.linalg.inv,
                     lambda g, x, o: (-o.T @ g @ o.T,), a)


def trace(a) -> Node:
    def vjp(g, x, o):
        return (g[0, 0] * np.eye(x.shape[0], x.shape[1]),)
    return primitive("trace", lambda x: np.array([[np.trace(x)]]), vjp, a)


def total(a) -> Node:
    return primitive("total", lambda x: np.array([[x.sum()]]),
                     lambda g, x, o: (np.full_like(x, g[0, 0]),), a)


def row_sum(a) -> Node:
    """Sum across columns, giving an Nx1 column."""
    return primitive("row_sum", lambda x: x.sum(axis=1, keepdims=True),
                     lambda g, x, o: (np.broadcast_to(g, x.shape).copy(),), a)


def col_sum(a) -> Node:
    """Sum down rows, giving a 1xD row."""
    return primitive("col_sum", lambda x: x.sum(axis=0, keepdims=True),
                     lambda g, x, o: (np.broadcast_to(g, x.shape).copy(),), a)


def diag_part(a) -> Node:
    """Diagonal of a square matrix as a 1xD row."""
    return primitive("diag_part", lambda x: np.diag(x)[None, :].copy(),
                     lambda g, x, o: (np.diag(g[0]),), a)


def diag_embed(a) -> Node:
    """Square diagonal matrix from a 1xD row or Dx1 column."""
    def fwd(x):
        return np.diag(x.ravel())

    def vjp(g, x, o):
        return (np.diag(g).reshape(x.shape).copy(),)
    return primitive("diag_embed", fwd, vjp, a)


def _softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(a) -> Node:
    def vjp(g, x, o):
        return (o * (g - (g * o).sum(axis=1, keepdims=True)),)
    return primitive("row_softmax", _softmax, vjp, a)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Node:
    return primitive("sigmoid", _sigmoid, lambda g, x, o: (g * o * (1.0 - o),), a)


def log(a) -> Node:
    def fwd(x):
        if (x <= 0).any():
            raise DomainError("log of a non-positive entry")
        return np.log(x)
    return primitive("log", fwd, lambda g, x, o: (g / x,), a)


def tanh(a) -> Node:
    return primitive("tanh", np.tanh, lambda g, x, o: (g * (1.0 - o**2),), a)


def absolute(a) -> Node:
    return primitive("abs", np.abs, lambda g, x, o: (g * np.sign(x),), a)


def square(a) -> Node:
    return primitive("square", np.square, lambda g, x, o: (2.0 * g * x,), a)


def clip(a, lo: float, hi: float) -> Node:
    def vjp(g, x, o):
        return (g * ((x >= lo) & (x <= hi)),)
    return primitive("clip", lambda x: np.clip(x, lo, hi), vjp, a)


def take_rows(table, idx) -> Node:
    """Row gather ``table[idx]``; the index array is a fixed constant."""
    idx = np.asarray(idx, dtype=np.int64).copy()

    def vjp(g, t, o):
        out = np.zeros_like(t)
        np.add.at(out, idx, g)
        return (out,)
    return primitive("take_rows", lambda t: t[idx], vjp, table)


def hconcat(*parts) -> Node:
    parts = [_lift(p) for p in parts]
    widths = [p.value.shape[1] for p in parts]
    cuts = np.cumsum(widths)[:-1]

    def vjp(g, *args):
        return tuple(np.split(g, cuts, axis=1))
    return primitive("hconcat", lambda *xs: np.hstack(xs), vjp, *parts)
