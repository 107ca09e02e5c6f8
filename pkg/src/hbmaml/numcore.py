"""Dense float64 linear algebra and a small reverse-mode autodiff tape.

Every vector-Jacobian product is itself written in terms of :class:`Node`
operations, so a backward pass run with ``create_graph=True`` is recorded
and can be differentiated again. This is what lets the meta-gradient flow
through the inner-loop gradient steps.

Values are plain ``numpy.ndarray`` objects in float64. Operations broadcast
over leading axes, which is how a whole meta-batch of tasks is evaluated in
one pass.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

Matrix = np.ndarray

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def no_record():
    """Evaluate operations without building graph edges."""
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


@contextmanager
def _set_recording(flag: bool):
    prev = _recording()
    _state.recording = flag
    try:
        yield
    finally:
        _state.recording = prev


class GraphError(ValueError):
    """Contract violation while building or differentiating a graph."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix expected to be SPD is not.

    ``kind`` is ``"indefinite"`` when a clearly negative eigenvalue exists
    and ``"singular"`` when the smallest eigenvalue is zero to working
    precision.
    """

    def __init__(self, kind: str, min_eig: float, what: str = "matrix"):
        self.kind = kind
        self.min_eig = min_eig
        super().__init__(f"{what} is {kind} (smallest eigenvalue {min_eig:.3e})")


class Node:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "name", "op")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, name=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name
        self.op = op

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def detach(self) -> "Node":
        return Node(self.value)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    @property
    def mT(self):
        return swap_last(self)


def leaf(value, name=None) -> Node:
    """A differentiable input."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def const(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def _make(value, parents: Sequence[Node], vjp: Callable, op: str) -> Node:
    if _recording() and any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), vjp, True, op=op)
    return Node(value, op=op)


# ---------------------------------------------------------------------------
# broadcasting helpers


def sum_to(x: Node, shape: tuple) -> Node:
    """Sum ``x`` down to ``shape`` (inverse of numpy broadcasting)."""
    x = const(x)
    if x.shape == tuple(shape):
        return x
    src = x.shape

    def vjp(g):
        return (broadcast_to(g, src),)

    return _make(_sum_to_array(x.value, shape), (x,), vjp, "sum_to")


def _sum_to_array(a: np.ndarray, shape: tuple) -> np.ndarray:
    lead = a.ndim - len(shape)
    if lead:
        a = a.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and a.shape[i] != 1)
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    return a


def broadcast_to(x: Node, shape: tuple) -> Node:
    x = const(x)
    if x.shape == tuple(shape):
        return x
    src = x.shape

    def vjp(g):
        return (sum_to(g, src),)

    return _make(np.broadcast_to(x.value, shape).copy(), (x,), vjp, "broadcast")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return sum_to(g, sa), sum_to(g, sb)

    return _make(a.value + b.value, (a, b), vjp, "add")


def sub(a, b) -> Node:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return sum_to(g, sa), sum_to(neg(g), sb)

    return _make(a.value - b.value, (a, b), vjp, "sub")


def neg(a) -> Node:
    a = const(a)
    return _make(-a.value, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Node:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)

    return _make(a.value * b.value, (a, b), vjp, "mul")


def div(a, b) -> Node:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = div(g, b)
        return sum_to(ga, sa), sum_to(neg(mul(ga, div(a, b))), sb)

    return _make(a.value / b.value, (a, b), vjp, "div")


def power(a, p: float) -> Node:
    a = const(a)
    if p == 2:
        return mul(a, a)

    def vjp(g):
        return (mul(g, mul(p, power(a, p - 1))),)

    return _make(a.value**p, (a,), vjp, "pow")


def square(a) -> Node:
    a = const(a)
    return mul(a, a)


def exp(a) -> Node:
    a = const(a)
    out_holder = []

    def vjp(g):
        return (mul(g, out_holder[0]),)

    out = _make(np.exp(a.value), (a,), vjp, "exp")
    out_holder.append(out)
    return out


def log(a) -> Node:
    a = const(a)
    return _make(np.log(a.value), (a,), lambda g: (div(g, a),), "log")


def tanh(a) -> Node:
    a = const(a)
    out_holder = []

    def vjp(g):
        t = out_holder[0]
        return (mul(g, sub(1.0, mul(t, t))),)

    out = _make(np.tanh(a.value), (a,), vjp, "tanh")
    out_holder.append(out)
    return out


def relu(a) -> Node:
    a = const(a)
    mask = (a.value > 0).astype(np.float64)
    return _make(a.value * mask, (a,), lambda g: (mul(g, mask),), "relu")


# ---------------------------------------------------------------------------
# reductions and shape


def sum(a, axis=None, keepdims=False) -> Node:  # noqa: A001
    a = const(a)
    src = a.shape
    if axis is None:
        axes = tuple(range(a.ndim))
    else:
        axes = tuple(ax % a.ndim for ax in np.atleast_1d(axis))

    def vjp(g):
        if not keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(src))
            g = reshape(g, kshape)
        return (broadcast_to(g, src),)

    return _make(a.value.sum(axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False) -> Node:
    a = const(a)
    if axis is None:
        count = a.value.size
    else:
        count = int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Node:
    a = const(a)
    src = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (reshape(g, src),), "reshape")


def swap_last(a) -> Node:
    a = const(a)
    return _make(np.swapaxes(a.value, -1, -2), (a,), lambda g: (swap_last(g),), "transpose")


def slice_last(a, start: int, stop: int) -> Node:
    """``a[..., start:stop]``."""
    a = const(a)
    width = a.shape[-1]

    def vjp(g):
        return (pad_last(g, start, width - stop),)

    return _make(a.value[..., start:stop], (a,), vjp, "slice")


def pad_last(a, before: int, after: int) -> Node:
    a = const(a)
    n = a.shape[-1]
    widths = [(0, 0)] * (a.ndim - 1) + [(before, after)]

    def vjp(g):
        return (slice_last(g, before, before + n),)

    return _make(np.pad(a.value, widths), (a,), vjp, "pad")


def concat_last(parts: Sequence[Node]) -> Node:
    parts = [const(p) for p in parts]
    widths = [p.shape[-1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def vjp(g):
        return tuple(slice_last(g, int(offsets[i]), int(offsets[i + 1])) for i in range(len(parts)))

    value = np.concatenate([p.value for p in parts], axis=-1)
    return _make(value, tuple(parts), vjp, "concat")


def matmul(a, b) -> Node:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return sum_to(matmul(g, swap_last(b)), sa), sum_to(matmul(swap_last(a), g), sb)

    return _make(np.matmul(a.value, b.value), (a, b), vjp, "matmul")


def logsumexp(a, axis=-1) -> Node:
    a = const(a)
    shift = np.max(a.value, axis=axis, keepdims=True)
    return add(log(sum(exp(sub(a, shift)), axis=axis, keepdims=True)), shift)


# ---------------------------------------------------------------------------
# matrix functions (batched over leading axes)


def inv(a) -> Node:
    a = const(a)
    out_holder = []

    def vjp(g):
        bt = swap_last(out_holder[0])
        return (neg(matmul(matmul(bt, g), bt)),)

    out = _make(np.linalg.inv(a.value), (a,), vjp, "inv")
    out_holder.append(out)
    return out


def logdet(a) -> Node:
    """log-determinant of SPD matrices, batched over leading axes."""
    a = const(a)
    value = _logdet_batched(a.value)

    def vjp(g):
        scale = reshape(g, g.shape + (1, 1))
        return (mul(scale, swap_last(inv(a))),)

    return _make(value, (a,), vjp, "logdet")


def _logdet_batched(a: np.ndarray) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        _raise_not_pd(a)
    return 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)


def _raise_not_pd(a: np.ndarray, what: str = "matrix"):
    eig = np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2)))
    lo = float(eig.min())
    scale = max(1.0, float(np.abs(eig).max()))
    kind = "indefinite" if lo < -1e-12 * scale else "singular"
    raise NotPositiveDefiniteError(kind, lo, what)


# ---------------------------------------------------------------------------
# reverse pass


def _topo(root: Node, targets: set) -> list:
    """Post-order over nodes lying on a path from a target to ``root``."""
    order = []
    relevant = {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        nid = id(node)
        if expanded:
            rel = nid in targets or any(relevant.get(id(p), False) for p in node.parents)
            relevant[nid] = rel
            if rel:
                order.append(node)
            continue
        if nid in relevant:
            continue
        relevant[nid] = False
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in relevant and p.requires_grad:
                stack.append((p, False))
    return order


def grad(f: Node, wrt: Sequence[Node], create_graph: bool = False, allow_unused: bool = False):
    """Gradients of scalar ``f`` with respect to each node in ``wrt``.

    With ``create_graph`` the results are Nodes wired into the graph so they
    can be differentiated again; otherwise plain arrays are returned.
    """
    if not isinstance(f, Node) or f.value.size != 1:
        raise GraphError(f"grad needs a scalar output, got shape {getattr(f, 'shape', None)}")
    wrt = list(wrt)
    targets = {id(w) for w in wrt}
    order = _topo(f, targets) if f.requires_grad else []
    reached = {id(n) for n in order}
    for w in wrt:
        if id(w) not in reached and not allow_unused:
            label = w.name or w.op
            raise GraphError(f"node {label!r} is not connected to the output")

    with _set_recording(create_graph):
        adj = {id(f): Node(np.ones_like(f.value))}
        for node in reversed(order):
            g = adj.pop(id(node), None) if id(node) not in targets else adj.get(id(node))
            if g is None or not node.parents:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not parent.requires_grad or id(parent) not in reached:
                    continue
                pid = id(parent)
                adj[pid] = pg if pid not in adj else add(adj[pid], pg)

    out = []
    for w in wrt:
        g = adj.get(id(w))
        if g is None:
            g = Node(np.zeros_like(w.value))
        out.append(g if create_graph else g.value)
    return out


# ---------------------------------------------------------------------------
# plain-array linear algebra


def _check_symmetric(a: np.ndarray, tol: float = 1e-10):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max())) if a.size else 1.0
    if float(np.abs(a - a.T).max(initial=0.0)) > tol * scale:
        raise ValueError("matrix is not symmetric")


def sym_eig(a: Matrix) -> tuple[np.ndarray, Matrix]:
    """Eigendecomposition of a symmetric matrix, eigenvalues ascending."""
    a = np.asarray(a, dtype=np.float64)
    _check_symmetric(a)
    return np.linalg.eigh(0.5 * (a + a.T))


def logdet_spd(a: Matrix) -> float:
    a = np.asarray(a, dtype=np.float64)
    _check_symmetric(a, tol=1e-8)
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        _raise_not_pd(a)
    diag = np.diag(chol)
    if np.any(diag <= 0.0):
        _raise_not_pd(a)
    return float(2.0 * np.log(diag).sum())


def kron(a: Matrix, b: Matrix) -> Matrix:
    return np.kron(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def block_diag(blocks: Iterable[Matrix]) -> Matrix:
    blocks = [np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in blocks]
    n = int(np.sum([b.shape[0] for b in blocks]))
    m = int(np.sum([b.shape[1] for b in blocks]))
    out = np.zeros((n, m))
    r = c = 0
    for b in blocks:
        out[r : r + b.shape[0], c : c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out
