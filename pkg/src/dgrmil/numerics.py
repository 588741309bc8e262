"""Dense float64 matrix kernels with reverse-mode automatic differentiation.

Everything downstream (the attention model, the losses, the training loop)
runs on the small computation graph defined here. Values are plain 2-D
numpy arrays in row-major order; a Node wraps one value together with the
closures that push gradients back to its inputs. A fresh graph is built
for every training step and discarded after the backward pass; parameter
leaves persist across steps.

Conventions:
  * all Node values are 2-D float64 arrays (vectors travel as one row),
  * gradients accumulate additively when a node feeds several consumers,
  * the backward pass starts from a 1x1 scalar node, resets the gradient
    of every reachable node, and visits each node exactly once in reverse
    topological order, so repeated backward calls are bit-reproducible.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class NumericsError(Exception):
    """Base class for numeric kernel failures."""


class DimensionError(NumericsError):
    """Operand shapes are incompatible."""


class SymmetryError(NumericsError):
    """A matrix required to be symmetric is not."""


class SingularMatrixError(NumericsError):
    """An eigenvalue fell below the invertibility floor."""


class DegenerateVectorError(NumericsError):
    """A vector that must have positive norm is numerically zero."""


def as_matrix(x) -> np.ndarray:
    """Coerce to a contiguous 2-D float64 array; 1-D input becomes one row."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"expected a matrix, got array of ndim={a.ndim}")
    return np.ascontiguousarray(a)


class Node:
    """One vertex of a reverse-mode differentiation graph.

    ``value`` is the 2-D array held at this vertex. ``parents`` is a tuple
    of ``(node, vjp)`` pairs where ``vjp`` maps the gradient at this vertex
    to the gradient contribution for that input.
    """

    __slots__ = ("value", "grad", "parents")

    def __init__(self, value, parents: Sequence[tuple["Node", Callable]] = ()):
        self.value = as_matrix(value)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    # Arithmetic sugar so loss code reads like the formulas it implements.
    # Scalars combine with any shape; Node operands must match shapes.
    def __add__(self, other):
        return shift(self, float(other)) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if _is_scalar(other):
            return shift(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        return scale(self, float(other)) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, leaf={not self.parents})"


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


def constant(x) -> Node:
    """Wrap an array as a leaf node (gradients into it are discarded)."""
    return Node(x)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _toposort(root: Node) -> list[Node]:
    """Post-order DFS: every node precedes its consumers; root is last."""
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Reverse accumulation from a 1x1 scalar root.

    Resets the gradient of every node reachable from ``root`` before
    accumulating, so two backward calls on the same graph give identical
    gradients. Nodes not reachable from ``root`` are left untouched.
    """
    if root.value.shape != (1, 1):
        raise DimensionError(f"backward needs a scalar (1x1) root, got {root.value.shape}")
    order = _toposort(root)
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones((1, 1))
    for node in reversed(order):
        g = node.grad
        for parent, vjp in node.parents:
            parent.grad += vjp(g)


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a, b) -> Node:
    """Matrix product with the usual product-rule adjoints."""
    a, b = _wrap(a), _wrap(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    av, bv = a.value, b.value
    return Node(av @ bv, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    return Node(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)])


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"sub shape mismatch: {a.value.shape} vs {b.value.shape}")
    return Node(a.value - b.value, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a, b) -> Node:
    """Elementwise (Hadamard) product."""
    a, b = _wrap(a), _wrap(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    return Node(av * bv, [(a, lambda g: g * bv), (b, lambda g: g * av)])


def scale(a, s: float) -> Node:
    a = _wrap(a)
    s = float(s)
    return Node(a.value * s, [(a, lambda g: g * s)])


def shift(a, c: float) -> Node:
    """Add a scalar to every entry."""
    a = _wrap(a)
    return Node(a.value + float(c), [(a, lambda g: g)])


def transpose(a) -> Node:
    a = _wrap(a)
    return Node(a.value.T, [(a, lambda g: g.T)])


def add_bias(m, bias) -> Node:
    """Add a 1xC row to every row of an nxC matrix."""
    m, bias = _wrap(m), _wrap(bias)
    if bias.value.shape != (1, m.value.shape[1]):
        raise DimensionError(f"bias {bias.value.shape} does not broadcast over {m.value.shape}")
    return Node(
        m.value + bias.value,
        [(m, lambda g: g), (bias, lambda g: g.sum(axis=0, keepdims=True))],
    )


def mul_bias(m, row) -> Node:
    """Multiply every row of an nxC matrix by a 1xC row."""
    m, row = _wrap(m), _wrap(row)
    if row.value.shape != (1, m.value.shape[1]):
        raise DimensionError(f"row {row.value.shape} does not broadcast over {m.value.shape}")
    mv, rv = m.value, row.value
    return Node(
        mv * rv,
        [(m, lambda g: g * rv), (row, lambda g: (g * mv).sum(axis=0, keepdims=True))],
    )


def slice_rows(a, start: int, stop: int) -> Node:
    a = _wrap(a)
    n = a.value.shape[0]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"row slice [{start}:{stop}] out of range for {a.value.shape}")

    def vjp(g, start=start, stop=stop, shape=a.value.shape):
        out = np.zeros(shape)
        out[start:stop] = g
        return out

    return Node(a.value[start:stop].copy(), [(a, vjp)])


def concat_cols(parts: Iterable) -> Node:
    parts = [_wrap(p) for p in parts]
    rows = parts[0].value.shape[0]
    for p in parts:
        if p.value.shape[0] != rows:
            raise DimensionError("concat_cols: row counts differ")
    edges = np.cumsum([0] + [p.value.shape[1] for p in parts])
    value = np.concatenate([p.value for p in parts], axis=1)
    links = [
        (p, (lambda g, j0=j0, j1=j1: g[:, j0:j1]))
        for p, j0, j1 in zip(parts, edges[:-1], edges[1:])
    ]
    return Node(value, links)


def sum_all(a) -> Node:
    a = _wrap(a)
    shape = a.value.shape
    return Node([[a.value.sum()]], [(a, lambda g: np.full(shape, g[0, 0]))])


def pick(a, i: int, j: int) -> Node:
    """Extract one entry as a 1x1 node."""
    a = _wrap(a)
    r, c = a.value.shape
    if not (0 <= i < r and 0 <= j < c):
        raise DimensionError(f"entry ({i}, {j}) out of range for {a.value.shape}")

    def vjp(g, i=i, j=j, shape=a.value.shape):
        out = np.zeros(shape)
        out[i, j] = g[0, 0]
        return out

    return Node([[a.value[i, j]]], [(a, vjp)])


def relu(a) -> Node:
    a = _wrap(a)
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), [(a, lambda g: g * mask)])


def tanh(a) -> Node:
    a = _wrap(a)
    t = np.tanh(a.value)
    return Node(t, [(a, lambda g: g * (1.0 - t * t))])


def sigmoid(a) -> Node:
    a = _wrap(a)
    x = a.value
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return Node(s, [(a, lambda g: g * s * (1.0 - s))])


def softmax_rows(m) -> Node:
    """Row-wise softmax, stabilized by per-row max subtraction."""
    m = _wrap(m)
    x = m.value
    e = np.exp(x - x.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return s * (g - dot)

    return Node(s, [(m, vjp)])


def log_softmax_rows(m) -> Node:
    m = _wrap(m)
    x = m.value
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    s = np.exp(y)

    def vjp(g):
        return g - s * g.sum(axis=1, keepdims=True)

    return Node(y, [(m, vjp)])


def row_normalize(m) -> Node:
    """Scale each row to unit Euclidean norm; gradients flow through."""
    m = _wrap(m)
    x = m.value
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if not np.all(norms > 0.0):
        raise DegenerateVectorError("cannot normalize a zero-norm row")
    y = x / norms

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (g - y * dot) / norms

    return Node(y, [(m, vjp)])


def layernorm_rows(m, eps: float = 1e-5) -> Node:
    """Per-row standardization (zero mean, unit variance)."""
    m = _wrap(m)
    x = m.value
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return inv * (g - gm - y * gy)

    return Node(y, [(m, vjp)])


def dropout(m, p: float, rng: np.random.Generator) -> Node:
    """Inverted dropout with a mask drawn from ``rng``; p=0 is a no-op."""
    if p <= 0.0:
        return _wrap(m)
    if not 0.0 < p < 1.0:
        raise DimensionError(f"dropout rate must be in [0, 1), got {p}")
    m = _wrap(m)
    mask = (rng.random(m.value.shape) >= p) / (1.0 - p)
    return Node(m.value * mask, [(m, lambda g: g * mask)])


def logdet_psd(s) -> Node:
    """log det of a small symmetric positive definite matrix.

    Computed from the eigendecomposition of the KxK input, so the cost is
    cubic in K only; the adjoint is the symmetrized inverse. The caller is
    responsible for adding jitter when the matrix may be singular.
    """
    s = _wrap(s)
    x = s.value
    k = x.shape[0]
    if x.shape[0] != x.shape[1]:
        raise DimensionError(f"logdet_psd needs a square matrix, got {x.shape}")
    asym = float(np.max(np.abs(x - x.T))) if k else 0.0
    if asym > 1e-8:
        raise SymmetryError(f"matrix is not symmetric: max |A - A^T| = {asym:.3e}")
    xs = 0.5 * (x + x.T)
    w, v = np.linalg.eigh(xs)
    if k == 0 or w.min() < 1e-14:
        raise SingularMatrixError(
            f"eigenvalue {w.min() if k else 0.0:.3e} below 1e-14; "
            "add jitter (epsilon * I) before taking logdet"
        )
    val = float(np.log(w).sum())

    def vjp(g):
        inv = (v / w) @ v.T
        out = g[0, 0] * inv
        return 0.5 * (out + out.T)

    return Node([[val]], [(s, vjp)])


def pinv(m) -> Node:
    """Moore-Penrose pseudo-inverse with the Golub-Pereyra adjoint."""
    m = _wrap(m)
    a = m.value
    p = np.linalg.pinv(a)

    def vjp(g):
        rm = np.eye(a.shape[0]) - a @ p  # range complement on the left
        rn = np.eye(a.shape[1]) - p @ a  # range complement on the right
        return -p.T @ g @ p.T + rm @ g.T @ (p @ p.T) + (p.T @ p) @ g.T @ rn

    return Node(p, [(m, vjp)])


def cosine_similarity(a, b) -> Node:
    """Cosine of the angle between two vectors, as a 1x1 node."""
    a, b = _wrap(a), _wrap(b)
    if a.value.size != b.value.size:
        raise DimensionError(f"cosine_similarity sizes differ: {a.value.shape} vs {b.value.shape}")
    av = a.value.reshape(-1)
    bv = b.value.reshape(-1)
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na <= 0.0 or nb <= 0.0:
        raise DegenerateVectorError("cosine_similarity is undefined for zero-norm vectors")
    c = float(av @ bv) / (na * nb)

    def vjp_a(g, shape=a.value.shape):
        da = bv / (na * nb) - (c / (na * na)) * av
        return (g[0, 0] * da).reshape(shape)

    def vjp_b(g, shape=b.value.shape):
        db = av / (na * nb) - (c / (nb * nb)) * bv
        return (g[0, 0] * db).reshape(shape)

    return Node([[c]], [(a, vjp_a), (b, vjp_b)])
