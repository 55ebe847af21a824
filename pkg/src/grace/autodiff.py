"""Reverse-mode differentiation over dense float64 matrices.

Values are computed eagerly as nodes are built (define-by-run); ``backward``
replays the graph in reverse topological order and accumulates gradients on
every reachable node, leaves included. All payloads are 2-D C-contiguous
float64 arrays; scalars are 1x1. The registered operations are exactly the
ones the rest of the package needs: matmul (with transpose flags), add,
scale, elementwise mul, relu, row l2-normalization, fused softmax
cross-entropy, full sum, and a fused sqrt(|det|) of a 3x3 matrix with a
closed-form adjugate gradient.

Also here: ``ParamVector`` (flat view of named parameter arrays with an exact
round trip), ``LossOracle`` (value/gradient pair over a flat parameter
vector), and ``hvp_fd`` (Hessian-vector products via central finite
differences of first-order gradients, keeping the tape single-level).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, InputError, NumericError, ShapeError

# Floor applied to |det| before the square root so the derivative stays
# finite at exactly-singular Gram matrices; far below any meaningful geometry.
DET_FLOOR = 1e-30

# Added to squared row norms before the square root in l2 normalization.
NORM_JITTER = 1e-12


class Tensor:
    """One node of the differentiation graph."""

    __slots__ = ("value", "grad", "parents", "op", "_vjps")

    def __init__(self, value: np.ndarray, parents: tuple = (), op: str = "leaf", vjps: tuple = ()):
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.op = op
        self._vjps = vjps

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(op={self.op!r}, shape={self.value.shape})"


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return np.ascontiguousarray(a)


def leaf(x, op: str = "leaf") -> Tensor:
    """Wrap an array as a graph leaf. Entries must be finite."""
    a = _as_matrix(x)
    if not np.isfinite(a).all():
        raise NumericError("leaf contains non-finite entries")
    return Tensor(a, (), op, ())


def constant(x) -> Tensor:
    return leaf(x, op="const")


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    av = a.value.T if transpose_a else a.value
    bv = b.value.T if transpose_b else b.value
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(
            f"matmul: cannot multiply {av.shape[0]}x{av.shape[1]} by {bv.shape[0]}x{bv.shape[1]}"
        )
    out = av @ bv

    def vjp_a(g):
        ga = g @ bv.T
        return ga.T if transpose_a else ga

    def vjp_b(g):
        gb = av.T @ g
        return gb.T if transpose_b else gb

    return Tensor(out, (a, b), "matmul", (vjp_a, vjp_b))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shape {a.value.shape} does not match {b.value.shape}")
    return Tensor(a.value + b.value, (a, b), "add", (lambda g: g, lambda g: g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.value * c, (a,), "scale", (lambda g: g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shape {a.value.shape} does not match {b.value.shape}")
    return Tensor(a.value * b.value, (a, b), "mul", (lambda g: g * b.value, lambda g: g * a.value))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return Tensor(np.where(mask, a.value, 0.0), (a,), "relu", (lambda g: g * mask,))


def tsum(a: Tensor) -> Tensor:
    shape = a.value.shape

    def vjp(g):
        return np.full(shape, g[0, 0])

    return Tensor(np.array([[a.value.sum()]]), (a,), "sum", (vjp,))


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Normalize each row to unit l2 norm (squared norm jittered by 1e-12)."""
    sq = np.sum(a.value * a.value, axis=1, keepdims=True)
    if np.any(sq == 0.0):
        raise NumericError("l2-normalize: a row has exactly zero norm")
    s = np.sqrt(sq + NORM_JITTER)
    out = a.value / s

    def vjp(g):
        dot = np.sum(g * a.value, axis=1, keepdims=True)
        return g / s - a.value * (dot / (s * sq + s * NORM_JITTER))

    return Tensor(out, (a,), "l2-normalize", (vjp,))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true class (scalar)."""
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != logits.value.shape[0]:
        raise ShapeError(
            f"cross-entropy: {y.shape} labels for {logits.value.shape[0]} logit rows"
        )
    n, k = logits.value.shape
    if y.size and (y.min() < 0 or y.max() >= k):
        raise InputError(f"label out of range [0, {k})")
    y = y.astype(np.intp)
    z = logits.value
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(z - m), axis=1, keepdims=True))
    nll = lse[:, 0] - z[np.arange(n), y]
    loss = np.array([[nll.mean()]])
    probs = np.exp(z - lse)

    def vjp(g):
        gz = probs.copy()
        gz[np.arange(n), y] -= 1.0
        return gz * (g[0, 0] / n)

    return Tensor(loss, (logits,), "softmax-cross-entropy", (vjp,))


def _cofactor_3x3(m: np.ndarray) -> np.ndarray:
    c = np.empty((3, 3))
    c[0, 0] = m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1]
    c[0, 1] = -(m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
    c[0, 2] = m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0]
    c[1, 0] = -(m[0, 1] * m[2, 2] - m[0, 2] * m[2, 1])
    c[1, 1] = m[0, 0] * m[2, 2] - m[0, 2] * m[2, 0]
    c[1, 2] = -(m[0, 0] * m[2, 1] - m[0, 1] * m[2, 0])
    c[2, 0] = m[0, 1] * m[1, 2] - m[0, 2] * m[1, 1]
    c[2, 1] = -(m[0, 0] * m[1, 2] - m[0, 2] * m[1, 0])
    c[2, 2] = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    return c


def det_3x3(m: np.ndarray) -> float:
    return float(
        m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
        - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
        + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0])
    )


def sqrt_abs_det_3x3(a: Tensor) -> Tensor:
    """Fused sqrt(|det(G)|) for a 3x3 matrix, gradient via the adjugate."""
    if a.value.shape != (3, 3):
        raise ShapeError(f"sqrt-abs-det-3x3: expected shape (3, 3), got {a.value.shape}")
    d = det_3x3(a.value)
    ad = abs(d)
    v = np.sqrt(max(ad, DET_FLOOR))
    if ad > DET_FLOOR:
        coeff = np.sign(d) / (2.0 * v)
        grad_d = coeff * _cofactor_3x3(a.value)
    else:
        grad_d = np.zeros((3, 3))

    def vjp(g):
        return grad_d * g[0, 0]

    return Tensor(np.array([[v]]), (a,), "sqrt-abs-det-3x3", (vjp,))


def mean_all(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.value.size)


def forward(root: Tensor) -> np.ndarray:
    """Value at the root. Computation is eager, so this is a cached lookup."""
    return root.value


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``grad`` for every reachable node.

    The root must be scalar (1x1). Gradients of all reachable nodes are
    zeroed first; fan-out accumulates additively.
    """
    if root.value.shape != (1, 1):
        raise ContractError(f"backward: root must be 1x1 scalar, got {root.value.shape}")
    order = _topo(root)
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones((1, 1))
    for node in reversed(order):
        g = node.grad
        for parent, vjp in zip(node.parents, node._vjps):
            parent.grad += vjp(g)


@dataclass(frozen=True)
class ParamVector:
    """Flat concatenation of named arrays with the layout to undo it."""

    data: np.ndarray
    layout: tuple[tuple[str, int, tuple[int, int]], ...]  # (name, offset, shape)

    @property
    def dim(self) -> int:
        return self.data.size

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def piece(self, name: str) -> np.ndarray:
        for nm, off, shape in self.layout:
            if nm == name:
                return self.data[off : off + shape[0] * shape[1]].reshape(shape)
        raise InputError(f"no parameter named {name!r}")

    def slices(self) -> dict[str, slice]:
        return {nm: slice(off, off + s[0] * s[1]) for nm, off, s in self.layout}


def flatten(named: Sequence[tuple[str, np.ndarray]]) -> ParamVector:
    layout = []
    chunks = []
    off = 0
    for name, arr in named:
        a = _as_matrix(arr)
        layout.append((name, off, a.shape))
        chunks.append(a.ravel())
        off += a.size
    data = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamVector(data, tuple(layout))


def unflatten(pv: ParamVector) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, off, shape in pv.layout:
        out.append((name, pv.data[off : off + shape[0] * shape[1]].reshape(shape).copy()))
    return out


@dataclass(frozen=True)
class LossOracle:
    """A scalar loss over a flat parameter vector, with its gradient."""

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    dim: int


def hvp_fd(loss: LossOracle, theta: np.ndarray, v: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Hessian-vector product by central finite differences of gradients.

    Returns (grad(theta + step v) - grad(theta - step v)) / (2 step). Exact on
    quadratics up to rounding; O(step^2) error in general.
    """
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if theta.shape != v.shape:
        raise ShapeError(f"hvp: direction shape {v.shape} does not match {theta.shape}")
    if step <= 0:
        raise InputError("hvp: step must be positive")
    if not np.linalg.norm(v) > 0:
        raise InputError("hvp: direction must be nonzero")
    gp = loss.grad(theta + step * v)
    gm = loss.grad(theta - step * v)
    if not (np.isfinite(gp).all() and np.isfinite(gm).all()):
        raise NumericError("hvp: non-finite gradient at a probe point")
    return (gp - gm) / (2.0 * step)
