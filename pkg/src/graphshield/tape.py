"""Dense 64-bit matrices with a define-by-run reverse-mode gradient tape.

Every tracked value is a 2-D float64 matrix (scalars are 1x1). The tape is
rebuilt on every forward pass; ``backward`` walks it once, deposits adjoints
on the leaf parameters and severs the graph so intermediates can be freed.

Sparse aggregation operators (``GraphAgg``, ``SegmentMap``) carry a fixed
sparsity pattern; only dense operands participate in differentiation.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor", "Param", "GraphAgg", "SegmentMap",
    "ShapeError", "NonFiniteError",
    "no_grad", "grad_enabled", "set_finite_guard", "constant",
    "add", "sub", "mul", "div", "neg", "scale", "shift",
    "matmul", "transpose", "concat_cols", "slice_cols", "gather_rows",
    "elu", "relu", "sigmoid", "exp", "log", "clamp_min", "sqrt",
    "row_sum", "col_sum", "total_sum", "mean_all", "rowdot",
    "frobenius_sq", "row_max_const", "rowwise_softmax", "logsumexp_rows",
    "segment_sum", "segment_broadcast", "neighbor_sum", "edge_aggregate",
    "segment_outer", "segment_bilinear", "rotate_pairs", "mvn_logpdf",
    "multihead_rowdot", "div_heads", "multihead_edge_attention",
    "multihead_segment_attention", "bucketed_chain_attention",
    "backward", "adam_step", "zero_grads",
    "save_tensors", "load_tensors",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes; message carries both."""


class NonFiniteError(FloatingPointError):
    """A public operation produced NaN or Inf."""


_GRAD_ENABLED = True
_FINITE_GUARD = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure forward evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_finite_guard(enabled: bool) -> bool:
    """Toggle per-operation NaN/Inf checks; returns the previous setting.

    Callers that disable the guard in hot loops must re-check finiteness at
    their own public boundaries.
    """
    global _FINITE_GUARD
    prev = _FINITE_GUARD
    _FINITE_GUARD = enabled
    return prev


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return np.ascontiguousarray(a)


def _check_finite(value: np.ndarray, op: str) -> None:
    if _FINITE_GUARD and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A matrix on the tape. ``value`` is the forward result; ``grad`` the adjoint."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = _as_matrix(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on non-scalar of shape {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; python floats become scale/shift (not differentiated)
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, other)
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return shift(neg(self), other)
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """A trainable leaf: tensor value plus Adam moment estimates."""

    __slots__ = ("m", "v", "step", "name")

    def __init__(self, value, name: str = ""):
        super().__init__(value, requires_grad=True)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0
        self.name = name

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape}, step={self.step})"


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _record(value: np.ndarray, op: str, parents: tuple[Tensor, ...],
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    _check_finite(value, op)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers (numpy 2-D semantics: dims equal or one of them is 1)
# ---------------------------------------------------------------------------

def _broadcastable(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    ash, bsh = a.shape, b.shape
    return _record(a.value + b.value, "add", (a, b),
                   lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    ash, bsh = a.shape, b.shape
    return _record(a.value - b.value, "sub", (a, b),
                   lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    av, bv, ash, bsh = a.value, b.value, a.shape, b.shape
    return _record(av * bv, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bv, ash), _unbroadcast(g * av, bsh)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "div")
    av, bv, ash, bsh = a.value, b.value, a.shape, b.shape
    out = av / bv
    return _record(out, "div", (a, b),
                   lambda g: (_unbroadcast(g / bv, ash),
                              _unbroadcast(-g * av / (bv * bv), bsh)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.value, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python float (not differentiated through ``c``)."""
    c = float(c)
    return _record(a.value * c, "scale", (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    """Add a python float elementwise."""
    return _record(a.value + float(c), "shift", (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    return _record(av @ bv, "matmul", (a, b),
                   lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _record(np.ascontiguousarray(a.value.T), "transpose", (a,),
                   lambda g: (np.ascontiguousarray(g.T),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols: empty input")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError(f"concat_cols: row mismatch {p.shape} vs {rows} rows")
    widths = [p.cols for p in parts]
    offs = np.cumsum([0] + widths)

    def backward_fn(g):
        return tuple(g[:, offs[i]:offs[i + 1]] for i in range(len(widths)))

    return _record(np.concatenate([p.value for p in parts], axis=1), "concat_cols",
                   tuple(parts), backward_fn)


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    if not (0 <= j0 < j1 <= a.cols):
        raise ShapeError(f"slice_cols: [{j0}:{j1}] out of range for {a.shape}")
    ash = a.shape

    def backward_fn(g):
        da = np.zeros(ash)
        da[:, j0:j1] = g
        return (da,)

    return _record(np.ascontiguousarray(a.value[:, j0:j1]), "slice_cols", (a,), backward_fn)


def _scatter_add_rows(shape: tuple[int, int], idx: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Row scatter-add with duplicate indices, via sort + add.reduceat."""
    out = np.zeros(shape)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    srt = idx[order]
    starts = np.flatnonzero(np.concatenate(([True], srt[1:] != srt[:-1])))
    out[srt[starts]] = np.add.reduceat(g[order], starts, axis=0)
    return out


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise ShapeError(f"gather_rows: index out of range for {a.rows} rows")
    ash = a.shape
    return _record(a.value[idx], "gather_rows", (a,),
                   lambda g: (_scatter_add_rows(ash, idx, g),))


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def elu(a: Tensor) -> Tensor:
    av = a.value
    pos = av > 0
    out = np.where(pos, av, np.expm1(av))
    return _record(out, "elu", (a,),
                   lambda g: (g * np.where(pos, 1.0, out + 1.0),))


def relu(a: Tensor) -> Tensor:
    av = a.value
    mask = av > 0
    return _record(av * mask, "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # Evaluate on the stable side of the exponent to avoid overflow.
    av = a.value
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ev = np.exp(av[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _record(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _record(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.value
    return _record(np.log(av), "log", (a,), lambda g: (g / av,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only through unclamped entries."""
    av = a.value
    mask = av > floor
    return _record(np.maximum(av, floor), "clamp_min", (a,), lambda g: (g * mask,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return _record(out, "sqrt", (a,), lambda g: (g / (2.0 * out),))


# ---------------------------------------------------------------------------
# reductions and row operations
# ---------------------------------------------------------------------------

def row_sum(a: Tensor) -> Tensor:
    rows = a.rows
    cols = a.cols
    return _record(a.value.sum(axis=1, keepdims=True), "row_sum", (a,),
                   lambda g: (np.broadcast_to(g, (rows, cols)).copy(),))


def col_sum(a: Tensor) -> Tensor:
    rows, cols = a.shape
    return _record(a.value.sum(axis=0, keepdims=True), "col_sum", (a,),
                   lambda g: (np.broadcast_to(g, (rows, cols)).copy(),))


def total_sum(a: Tensor) -> Tensor:
    ash = a.shape
    return _record(np.array([[a.value.sum()]]), "total_sum", (a,),
                   lambda g: (np.full(ash, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    return scale(total_sum(a), 1.0 / a.value.size)


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner product: (n,c),(n,c) -> (n,1)."""
    if a.shape != b.shape:
        raise ShapeError(f"rowdot: shapes differ {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _record((av * bv).sum(axis=1, keepdims=True), "rowdot", (a, b),
                   lambda g: (g * bv, g * av))


def frobenius_sq(a: Tensor) -> Tensor:
    av = a.value
    return _record(np.array([[float((av * av).sum())]]), "frobenius_sq", (a,),
                   lambda g: (2.0 * g[0, 0] * av,))


def row_max_const(a: Tensor) -> Tensor:
    """Rowwise max detached from the tape (log-sum-exp shift)."""
    return constant(a.value.max(axis=1, keepdims=True))


def rowwise_softmax(a: Tensor) -> Tensor:
    e = exp(sub(a, row_max_const(a)))
    return div(e, row_sum(e))


def logsumexp_rows(a: Tensor) -> Tensor:
    """Rowwise log(sum(exp(.))), shifted by the detached row max for stability."""
    m = row_max_const(a)
    return add(log(row_sum(exp(sub(a, m)))), m)


# ---------------------------------------------------------------------------
# fixed-sparsity aggregation operators
# ---------------------------------------------------------------------------

class SegmentMap:
    """Fixed 0/1 aggregation matrix (n_segments x n_rows), with its transpose.

    ``row_segment[r]`` gives the owning segment of row r; every row belongs to
    exactly one segment.
    """

    def __init__(self, row_segment: np.ndarray, n_segments: int):
        row_segment = np.asarray(row_segment, dtype=np.int64)
        n_rows = row_segment.size
        if n_rows and (row_segment.min() < 0 or row_segment.max() >= n_segments):
            raise ShapeError("SegmentMap: segment id out of range")
        data = np.ones(n_rows)
        cols = np.arange(n_rows)
        self.mat = sp.csr_matrix((data, (row_segment, cols)), shape=(n_segments, n_rows))
        self.mat_t = self.mat.T.tocsr()
        self.row_segment = row_segment
        self.n_segments = n_segments
        self.n_rows = n_rows


class GraphAgg:
    """Fixed directed aggregation pattern: out[t] += w_e * x[s] per edge e=(t,s).

    (target, source) pairs must be unique. Also exposes unweighted sums over the
    same pattern. Per-call weighted matrices reuse the precomputed CSR layout.
    """

    def __init__(self, tgt: np.ndarray, src: np.ndarray, n_rows: int):
        tgt = np.asarray(tgt, dtype=np.int64)
        src = np.asarray(src, dtype=np.int64)
        if tgt.shape != src.shape or tgt.ndim != 1:
            raise ShapeError("GraphAgg: tgt/src must be equal-length 1-D arrays")
        m = tgt.size
        if m and (min(tgt.min(), src.min()) < 0 or max(tgt.max(), src.max()) >= n_rows):
            raise ShapeError("GraphAgg: node index out of range")
        tagged = sp.coo_matrix((np.arange(1, m + 1, dtype=np.float64), (tgt, src)),
                               shape=(n_rows, n_rows)).tocsr()
        if tagged.nnz != m:
            raise ShapeError("GraphAgg: duplicate (target, source) pairs")
        self._perm = tagged.data.astype(np.int64) - 1
        self._indices = tagged.indices
        self._indptr = tagged.indptr
        tagged_t = tagged.T.tocsr()
        self._perm_t = tagged_t.data.astype(np.int64) - 1
        self._indices_t = tagged_t.indices
        self._indptr_t = tagged_t.indptr
        ones = sp.csr_matrix((np.ones(m), self._indices.copy(), self._indptr.copy()),
                             shape=(n_rows, n_rows))
        self.ones = ones
        self.ones_t = ones.T.tocsr()
        # edge-to-row scatter operators (transposed gather selections)
        eye_data = np.ones(m)
        edge_ids = np.arange(m)
        self.scatter_tgt = sp.csr_matrix((eye_data, (tgt, edge_ids)), shape=(n_rows, m))
        self.scatter_src = sp.csr_matrix((eye_data, (src, edge_ids)), shape=(n_rows, m))
        self.tgt = tgt
        self.src = src
        self.n_rows = n_rows
        self.n_edges = m

    def weighted(self, w: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((w[self._perm], self._indices, self._indptr),
                             shape=(self.n_rows, self.n_rows))

    def weighted_t(self, w: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((w[self._perm_t], self._indices_t, self._indptr_t),
                             shape=(self.n_rows, self.n_rows))


def segment_sum(seg: SegmentMap, x: Tensor) -> Tensor:
    """Sum rows of x per segment: (n_rows, c) -> (n_segments, c)."""
    if x.rows != seg.n_rows:
        raise ShapeError(f"segment_sum: {x.rows} rows vs map over {seg.n_rows}")
    mat, mat_t = seg.mat, seg.mat_t
    return _record(np.asarray(mat @ x.value), "segment_sum", (x,),
                   lambda g: (np.asarray(mat_t @ g),))


def segment_broadcast(seg: SegmentMap, x: Tensor) -> Tensor:
    """Copy each segment's row of x back to all member rows: inverse gather."""
    if x.rows != seg.n_segments:
        raise ShapeError(f"segment_broadcast: {x.rows} rows vs {seg.n_segments} segments")
    mat, mat_t = seg.mat, seg.mat_t
    return _record(np.asarray(mat_t @ x.value), "segment_broadcast", (x,),
                   lambda g: (np.asarray(mat @ g),))


def neighbor_sum(agg: GraphAgg, x: Tensor) -> Tensor:
    """out[t] = sum over edges (t,s) of x[s]; unweighted aggregation."""
    if x.rows != agg.n_rows:
        raise ShapeError(f"neighbor_sum: {x.rows} rows vs pattern over {agg.n_rows}")
    ones, ones_t = agg.ones, agg.ones_t
    return _record(np.asarray(ones @ x.value), "neighbor_sum", (x,),
                   lambda g: (np.asarray(ones_t @ g),))


def edge_aggregate(agg: GraphAgg, w: Tensor, v: Tensor) -> Tensor:
    """out[t] = sum over edges (t,s) of w_e * v[s]; w is (n_edges, 1)."""
    if w.shape != (agg.n_edges, 1):
        raise ShapeError(f"edge_aggregate: weights {w.shape}, expected ({agg.n_edges}, 1)")
    if v.rows != agg.n_rows:
        raise ShapeError(f"edge_aggregate: {v.rows} value rows vs pattern over {agg.n_rows}")
    wv = w.value[:, 0]
    vv = v.value
    tgt, src = agg.tgt, agg.src
    out = np.asarray(agg.weighted(wv) @ vv)

    def backward_fn(g):
        dw = (g[tgt] * vv[src]).sum(axis=1, keepdims=True)
        dv = np.asarray(agg.weighted_t(wv) @ g)
        return (dw, dv)

    return _record(out, "edge_aggregate", (w, v), backward_fn)


def segment_outer(seg: SegmentMap, a: Tensor, b: Tensor) -> Tensor:
    """Per-segment sum of row outer products, flattened.

    (n,p),(n,q) -> (n_segments, p*q) with out[s] = sum_{r in s} a[r]^T b[r].
    """
    if a.rows != b.rows or a.rows != seg.n_rows:
        raise ShapeError(f"segment_outer: rows {a.rows},{b.rows} vs map over {seg.n_rows}")
    av, bv = a.value, b.value
    n, p = av.shape
    q = bv.shape[1]
    outer = (av[:, :, None] * bv[:, None, :]).reshape(n, p * q)
    out = np.asarray(seg.mat @ outer)
    mat_t = seg.mat_t

    def backward_fn(g):
        gr = np.asarray(mat_t @ g).reshape(n, p, q)
        da = np.matmul(gr, bv[:, :, None])[:, :, 0]
        db = np.matmul(gr.transpose(0, 2, 1), av[:, :, None])[:, :, 0]
        return (da, db)

    return _record(out, "segment_outer", (a, b), backward_fn)


def segment_bilinear(seg: SegmentMap, q: Tensor, mats: Tensor) -> Tensor:
    """Apply each segment's (p x c) matrix to its member rows of q.

    q is (n, p); mats is (n_segments, p*c); out[r] = q[r] @ mats[seg(r)].
    """
    if q.rows != seg.n_rows:
        raise ShapeError(f"segment_bilinear: {q.rows} rows vs map over {seg.n_rows}")
    if mats.rows != seg.n_segments:
        raise ShapeError(f"segment_bilinear: {mats.rows} matrices vs {seg.n_segments} segments")
    p = q.cols
    if mats.cols % p != 0:
        raise ShapeError(f"segment_bilinear: {mats.cols} not divisible by row width {p}")
    c = mats.cols // p
    qv = q.value
    mv = mats.value
    n = qv.shape[0]
    mr = np.asarray(seg.mat_t @ mv).reshape(n, p, c)
    out = np.matmul(qv[:, None, :], mr)[:, 0, :]
    mat, mat_t = seg.mat, seg.mat_t

    def backward_fn(g):
        mr_b = np.asarray(mat_t @ mv).reshape(n, p, c)
        dq = np.matmul(mr_b, g[:, :, None])[:, :, 0]
        dm = np.asarray(mat @ (qv[:, :, None] * g[:, None, :]).reshape(n, p * c))
        return (dq, dm)

    return _record(out, "segment_bilinear", (q, mats), backward_fn)


def _head_view(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads)


def multihead_rowdot(a: Tensor, b: Tensor, heads: int) -> Tensor:
    """Per-head row inner products: (n, d),(n, d) -> (n, heads)."""
    if a.shape != b.shape or a.cols % heads != 0:
        raise ShapeError(f"multihead_rowdot: shapes {a.shape},{b.shape}, heads {heads}")
    av, bv = a.value, b.value
    dh = a.cols // heads
    out = (_head_view(av, heads) * _head_view(bv, heads)).sum(axis=2)

    def backward_fn(g):
        ge = np.repeat(g, dh, axis=1)
        return (ge * bv, ge * av)

    return _record(out, "multihead_rowdot", (a, b), backward_fn)


def div_heads(num: Tensor, den: Tensor, heads: int) -> Tensor:
    """Divide each head block of ``num`` by its column of ``den`` (n, heads)."""
    if num.rows != den.rows or den.cols != heads or num.cols % heads != 0:
        raise ShapeError(f"div_heads: {num.shape} / {den.shape} with heads {heads}")
    dh = num.cols // heads
    den_rep = np.repeat(den.value, dh, axis=1)
    out = num.value / den_rep

    def backward_fn(g):
        dn = g / den_rep
        dd = -(_head_view(g * out, heads)).sum(axis=2) / den.value
        return (dn, dd)

    return _record(out, "div_heads", (num, den), backward_fn)


def multihead_edge_attention(agg: GraphAgg, pq: Tensor, pk: Tensor, v: Tensor,
                             heads: int) -> Tensor:
    """Per-head kernel-weighted neighbor sums in one node.

    For every edge (t, s) and head h: weight = pq[t, h] . pk[s, h]; the head
    output row t accumulates weight * v[s, h]. Equals the separable-attention
    numerator over each target's neighbor set.
    """
    n, d = pq.shape
    if pk.shape != (n, d) or v.shape != (n, d) or d % heads != 0:
        raise ShapeError(f"multihead_edge_attention: {pq.shape},{pk.shape},{v.shape}")
    dh = d // heads
    tgt, src = agg.tgt, agg.src
    pqv, pkv, vv = pq.value, pk.value, v.value
    pq_t = _head_view(pqv[tgt], heads)
    pk_s = _head_view(pkv[src], heads)
    w = (pq_t * pk_s).sum(axis=2)                      # (m, heads)
    out = np.empty((n, d))
    mats = []
    for h in range(heads):
        m_h = agg.weighted(w[:, h])
        mats.append(m_h)
        out[:, h * dh:(h + 1) * dh] = m_h @ vv[:, h * dh:(h + 1) * dh]

    def backward_fn(g):
        g_t = _head_view(g[tgt], heads)
        v_s = _head_view(vv[src], heads)
        dw = (g_t * v_s).sum(axis=2)                   # (m, heads)
        dpq = np.asarray(agg.scatter_tgt @ (dw[:, :, None] * pk_s).reshape(-1, d))
        dpk = np.asarray(agg.scatter_src @ (dw[:, :, None] * pq_t).reshape(-1, d))
        dv = np.empty_like(vv)
        for h in range(heads):
            dv[:, h * dh:(h + 1) * dh] = mats[h].T @ g[:, h * dh:(h + 1) * dh]
        return (dpq, dpk, dv)

    return _record(out, "multihead_edge_attention", (pq, pk, v), backward_fn)


def multihead_segment_attention(seg: SegmentMap, pq: Tensor, pk: Tensor, v: Tensor,
                                heads: int) -> Tensor:
    """Per-head separable attention numerator over full segments.

    Each segment caches sum_j pk[j, h]^T v[j, h]; every member row applies its
    own pq[i, h] to the cached matrix.
    """
    n, d = pq.shape
    if pk.shape != (n, d) or v.shape != (n, d) or d % heads != 0:
        raise ShapeError(f"multihead_segment_attention: {pq.shape},{pk.shape},{v.shape}")
    dh = d // heads
    mat, mat_t = seg.mat, seg.mat_t
    pqv, pkv, vv = pq.value, pk.value, v.value
    out = np.empty((n, d))
    cached = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        outer = (pkv[:, sl, None] * vv[:, None, sl]).reshape(n, dh * dh)
        skv = np.asarray(mat @ outer)                  # (n_seg, dh*dh)
        cached.append(skv)
        mr = np.asarray(mat_t @ skv).reshape(n, dh, dh)
        out[:, sl] = np.matmul(pqv[:, None, sl], mr)[:, 0, :]

    def backward_fn(g):
        dpq = np.empty_like(pqv)
        dpk = np.empty_like(pkv)
        dv = np.empty_like(vv)
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            gh = g[:, sl]
            mr = np.asarray(mat_t @ cached[h]).reshape(n, dh, dh)
            dpq[:, sl] = np.matmul(mr, gh[:, :, None])[:, :, 0]
            dskv = np.asarray(mat @ (pqv[:, sl, None] * gh[:, None, :]).reshape(n, dh * dh))
            douter = np.asarray(mat_t @ dskv).reshape(n, dh, dh)
            dpk[:, sl] = np.matmul(douter, vv[:, sl, None])[:, :, 0]
            dv[:, sl] = np.matmul(douter.transpose(0, 2, 1), pkv[:, sl, None])[:, :, 0]
        return (dpq, dpk, dv)

    return _record(out, "multihead_segment_attention", (pq, pk, v), backward_fn)


def bucketed_chain_attention(buckets: Sequence[np.ndarray], pq: Tensor, pk: Tensor,
                             v: Tensor, heads: int) -> Tensor:
    """Dense separable attention within each chain, normalized, per head.

    ``buckets`` holds int64 row matrices (m_chains, padded_len) with -1
    padding; every real row appears in exactly one bucket cell. For each
    chain, every member attends over all members:
    out_i = sum_j (pq_i . pk_j) v_j / sum_j (pq_i . pk_j). Kernel features
    must be strictly positive so the denominators stay positive.
    """
    n, d = pq.shape
    if pk.shape != (n, d) or v.shape != (n, d) or d % heads != 0:
        raise ShapeError(f"bucketed_chain_attention: {pq.shape},{pk.shape},{v.shape}")
    dh = d // heads
    pqv, pkv, vv = pq.value, pk.value, v.value
    out = np.zeros((n, d))
    saved = []

    def head_split(x):
        # (m, kp, d) -> (m, heads, kp, dh)
        return x.reshape(x.shape[0], x.shape[1], heads, dh).transpose(0, 2, 1, 3)

    for rows in buckets:
        m, kp = rows.shape
        mask = rows >= 0
        safe = np.where(mask, rows, 0)
        flat = safe.ravel()
        q4 = head_split(pqv[flat].reshape(m, kp, d))
        k4 = head_split(pkv[flat].reshape(m, kp, d))
        v4 = head_split(vv[flat].reshape(m, kp, d))
        sim = np.matmul(q4, k4.transpose(0, 1, 3, 2))
        sim *= mask[:, None, None, :]
        den = sim.sum(axis=3, keepdims=True)
        o4 = np.matmul(sim, v4) / den
        merged = o4.transpose(0, 2, 1, 3).reshape(m, kp, d)
        out[safe[mask]] = merged[mask]
        saved.append((rows, mask, safe, sim, den, q4, k4, v4, o4))

    def backward_fn(g):
        dpq = np.zeros_like(pqv)
        dpk = np.zeros_like(pkv)
        dv = np.zeros_like(vv)
        for rows, mask, safe, sim, den, q4, k4, v4, o4 in saved:
            m, kp = rows.shape
            g4 = head_split(g[safe.ravel()].reshape(m, kp, d))
            g4 = g4 * mask[:, None, :, None]     # padded queries carry no grad
            dnum = g4 / den
            dden = -(g4 * o4).sum(axis=3) / den[:, :, :, 0]
            dsim = np.matmul(dnum, v4.transpose(0, 1, 3, 2)) + dden[:, :, :, None]
            dsim = dsim * mask[:, None, None, :]
            dq4 = np.matmul(dsim, k4)
            dk4 = np.matmul(dsim.transpose(0, 1, 3, 2), q4)
            dv4 = np.matmul(sim.transpose(0, 1, 3, 2), dnum)

            def merge(x4):
                return x4.transpose(0, 2, 1, 3).reshape(m, kp, d)

            dpq[safe[mask]] += merge(dq4)[mask]
            dpk[safe[mask]] += merge(dk4)[mask]
            dv[safe[mask]] += merge(dv4)[mask]
        return (dpq, dpk, dv)

    return _record(out, "bucketed_chain_attention", (pq, pk, v), backward_fn)


def rotate_pairs(a: Tensor) -> Tensor:
    """Column-pair map (x0,x1) -> (x1,-x0); its transpose is its negation."""
    if a.cols % 2 != 0:
        raise ShapeError(f"rotate_pairs: column count {a.cols} is odd")
    av = a.value

    def fwd(x):
        out = np.empty_like(x)
        out[:, 0::2] = x[:, 1::2]
        out[:, 1::2] = -x[:, 0::2]
        return out

    return _record(fwd(av), "rotate_pairs", (a,), lambda g: (-fwd(g),))


# ---------------------------------------------------------------------------
# multivariate normal log-density (factorized; no explicit inverse in forward)
# ---------------------------------------------------------------------------

_LOG_2PI = float(np.log(2.0 * np.pi))


def mvn_logpdf(z: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """log N(z_i | mu, sigma) per row via Cholesky factorization.

    z: (n, d); mu: (1, d); sigma: (d, d) symmetric positive definite.
    Backward uses the closed forms d/dz = -alpha, d/dmu = alpha,
    d/dSigma = (alpha alpha^T - Sigma^{-1}) / 2 with alpha = Sigma^{-1}(z - mu).
    """
    d = z.cols
    if mu.shape != (1, d) or sigma.shape != (d, d):
        raise ShapeError(f"mvn_logpdf: z {z.shape}, mu {mu.shape}, sigma {sigma.shape}")
    try:
        chol = np.linalg.cholesky(sigma.value)
    except np.linalg.LinAlgError as err:
        raise NonFiniteError(f"mvn_logpdf: covariance not positive definite ({err})") from err
    delta = z.value - mu.value
    # alpha = Sigma^-1 delta^T via two triangular solves
    from scipy.linalg import solve_triangular

    half = solve_triangular(chol, delta.T, lower=True, check_finite=False)
    alpha = solve_triangular(chol.T, half, lower=False, check_finite=False).T
    quad = (delta * alpha).sum(axis=1, keepdims=True)
    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    out = -0.5 * (d * _LOG_2PI + logdet + quad)
    inv_half = solve_triangular(chol, np.eye(d), lower=True, check_finite=False)
    prec = inv_half.T @ inv_half

    def backward_fn(g):
        dz = -g * alpha
        dmu = (g * alpha).sum(axis=0, keepdims=True)
        dsig = 0.5 * ((g * alpha).T @ alpha - g.sum() * prec)
        return (dz, dmu, dsig)

    return _record(out, "mvn_logpdf", (z, mu, sigma), backward_fn)


# ---------------------------------------------------------------------------
# backward pass and optimizer
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; deposits adjoints on requires-grad leaves.

    The visited graph is severed afterwards so intermediate values can be
    collected; leaf ``grad`` fields accumulate across calls until zeroed.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be scalar, got {loss.shape}")
    if not loss.requires_grad:
        return

    # iterative topological order (post-order DFS)
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    # rebind instead of += : backward closures may hand the
                    # same array to several parents
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        elif node.requires_grad:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g

    # sever the tape
    for node in order:
        node._parents = ()
        node._backward = None


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.grad = None


def adam_step(params: Iterable[Param], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update from each param's accumulated adjoint."""
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    for p in params:
        if p.grad is None:
            raise ValueError(f"adam_step: param {p.name!r} has no adjoint")
        p.step += 1
        g = p.grad
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
        _check_finite(p.value, "adam_step")


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, named little-endian f64 tensors
# ---------------------------------------------------------------------------

_MAGIC = b"GSHIELD\x00"
_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(tensors)))
        for name, arr in tensors.items():
            a = _as_matrix(arr)
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<II", a.shape[0], a.shape[1]))
            fh.write(a.astype("<f8").tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            rows, cols = struct.unpack("<II", fh.read(8))
            payload = fh.read(rows * cols * 8)
            if len(payload) != rows * cols * 8:
                raise ValueError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
    return out
