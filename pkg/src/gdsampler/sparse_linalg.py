"""Sparse symmetric storage, colored finite-difference Hessians and sparse Cholesky.

Matrices are symmetric and stored as the lower triangle in compressed-column
layout.  The factorization is an up-looking left-to-right Cholesky driven by
the elimination tree; for block-arrow matrices (household blocks first,
population block last) fill is confined to the border rows, so the cost is
linear in the number of household blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np
import scipy.io
import scipy.sparse as sp

__all__ = [
    "SparsityPattern",
    "SparseSymMatrix",
    "Coloring",
    "CholFactor",
    "NotPositiveDefinite",
    "NonFiniteGradient",
    "block_arrow_pattern",
    "color_pattern",
    "fd_hessian",
    "cholesky",
    "solve_lt",
    "write_matrix_market",
]


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a non-positive pivot is met during factorization."""

    def __init__(self, pivot: int, value: float):
        super().__init__(f"non-positive pivot {value:.6g} at column {pivot}")
        self.pivot = pivot
        self.value = value


class NonFiniteGradient(FloatingPointError):
    def __init__(self, color: int):
        super().__init__(f"non-finite gradient after perturbing color group {color}")
        self.color = color


# ---------------------------------------------------------------------------
# Patterns and matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SparsityPattern:
    """Lower-triangle structure of a symmetric matrix in CSC form."""

    dim: int
    col_ptr: np.ndarray
    row_idx: np.ndarray

    def __post_init__(self):
        cp = np.asarray(self.col_ptr, dtype=np.int64)
        ri = np.asarray(self.row_idx, dtype=np.int64)
        object.__setattr__(self, "col_ptr", cp)
        object.__setattr__(self, "row_idx", ri)
        if cp.shape != (self.dim + 1,) or cp[0] != 0 or np.any(np.diff(cp) < 1):
            raise ValueError("col_ptr must start at 0 and give every column an entry")
        if ri.shape != (cp[-1],):
            raise ValueError("row_idx length must equal col_ptr[-1]")
        cols = np.repeat(np.arange(self.dim), np.diff(cp))
        if np.any(ri[cp[:-1]] != np.arange(self.dim)) or np.any(ri < cols):
            raise ValueError("each column must start at its diagonal and hold the lower triangle only")
        inner = np.diff(ri) > 0
        inner[cp[1:-1] - 1] = True
        if not np.all(inner):
            raise ValueError("row indices must increase strictly within a column")

    @property
    def nnz_lower(self) -> int:
        return int(self.col_ptr[-1])

    @property
    def nnz_full(self) -> int:
        return 2 * self.nnz_lower - self.dim

    def columns(self) -> list[np.ndarray]:
        return [self.row_idx[self.col_ptr[j] : self.col_ptr[j + 1]] for j in range(self.dim)]

    def coo(self) -> tuple[np.ndarray, np.ndarray]:
        """(rows, cols) of the stored lower-triangle entries, column-major."""
        cols = np.repeat(np.arange(self.dim), np.diff(self.col_ptr))
        return self.row_idx.copy(), cols

    def full_bool(self) -> sp.csr_matrix:
        rows, cols = self.coo()
        ones = np.ones(rows.size, dtype=np.int8)
        lower = sp.csr_matrix((ones, (rows, cols)), shape=(self.dim, self.dim))
        full = lower + lower.T
        full.data[:] = 1
        return full.tocsr()

    @classmethod
    def from_dense_mask(cls, mask: np.ndarray) -> "SparsityPattern":
        mask = np.asarray(mask, dtype=bool)
        mask = mask | mask.T | np.eye(mask.shape[0], dtype=bool)
        low = sp.csc_matrix(np.tril(mask).astype(np.int8))
        low.sort_indices()
        return cls(mask.shape[0], low.indptr, low.indices)


def block_arrow_pattern(n_units: int, unit_dim: int, pop_dim: int) -> SparsityPattern:
    """Pattern with dense unit blocks on the diagonal and a dense population border."""
    N, k, p = n_units, unit_dim, pop_dim
    dim = N * k + p
    j = np.arange(N * k)
    unit_counts = (k - j % k) + p
    pop_counts = p - np.arange(p)
    counts = np.concatenate([unit_counts, pop_counts]).astype(np.int64)
    col_ptr = np.zeros(dim + 1, dtype=np.int64)
    col_ptr[1:] = np.cumsum(counts)
    # offset of each stored entry within its column
    offset = np.arange(col_ptr[-1]) - np.repeat(col_ptr[:-1], counts)
    col = np.repeat(np.arange(dim), counts)
    in_block = np.repeat(np.concatenate([k - j % k, np.full(p, 0)]), counts)
    row_idx = np.where(
        col < N * k,
        np.where(offset < in_block, col + offset, N * k + offset - in_block),
        col + offset,
    )
    return SparsityPattern(dim, col_ptr, row_idx)


@dataclass(frozen=True)
class SparseSymMatrix:
    """Symmetric matrix, lower triangle in CSC layout."""

    pattern: SparsityPattern
    values: np.ndarray
    _full: list = field(default_factory=list, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.pattern.dim

    @property
    def col_ptr(self) -> np.ndarray:
        return self.pattern.col_ptr

    @property
    def row_idx(self) -> np.ndarray:
        return self.pattern.row_idx

    def lower(self) -> sp.csc_matrix:
        return sp.csc_matrix(
            (self.values, self.pattern.row_idx, self.pattern.col_ptr),
            shape=(self.dim, self.dim),
        )

    def to_scipy(self) -> sp.csr_matrix:
        """Full symmetric matrix as CSR (cached)."""
        if not self._full:
            low = self.lower()
            full = (low + low.T - sp.diags(low.diagonal())).tocsr()
            self._full.append(full)
        return self._full[0]

    def toarray(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.to_scipy() @ x

    def diagonal(self) -> np.ndarray:
        return self.values[self.pattern.col_ptr[:-1]]

    def scaled(self, factor: float) -> "SparseSymMatrix":
        return SparseSymMatrix(self.pattern, self.values * factor)

    def permuted(self, perm: np.ndarray) -> "SparseSymMatrix":
        """Return P A P' with (P A P')[i, j] = A[perm[i], perm[j]]."""
        full = self.to_scipy()[perm][:, perm]
        low = sp.tril(full).tocsc()
        low.sort_indices()
        return SparseSymMatrix(SparsityPattern(self.dim, low.indptr, low.indices), low.data.copy())

    @classmethod
    def from_dense(cls, A: np.ndarray, pattern: SparsityPattern | None = None) -> "SparseSymMatrix":
        A = np.asarray(A, dtype=float)
        if pattern is None:
            pattern = SparsityPattern.from_dense_mask(A != 0)
        rows, cols = pattern.coo()
        return cls(pattern, A[rows, cols].copy())


def write_matrix_market(path, matrix) -> None:
    """Dump a SparseSymMatrix or CholFactor in MatrixMarket coordinate format."""
    if isinstance(matrix, CholFactor):
        scipy.io.mmwrite(path, matrix.L_scipy(), comment="lower Cholesky factor")
    elif isinstance(matrix, SparseSymMatrix):
        scipy.io.mmwrite(path, matrix.lower(), symmetry="symmetric")
    elif isinstance(matrix, SparsityPattern):
        rows, cols = matrix.coo()
        pat = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(matrix.dim, matrix.dim))
        scipy.io.mmwrite(path, pat, field="pattern", symmetry="symmetric")
    else:
        raise TypeError(f"cannot dump {type(matrix).__name__}")


# ---------------------------------------------------------------------------
# Coloring and finite-difference Hessians
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Coloring:
    n_colors: int
    color_of: np.ndarray

    def groups(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.color_of == c) for c in range(self.n_colors)]


def color_pattern(pattern: SparsityPattern, dense_cutoff: float | None = None) -> Coloring:
    """Partition columns so every Hessian entry is recoverable by symmetry.

    Columns whose degree exceeds ``dense_cutoff`` (default
    ``sqrt(2 * offdiagonal nnz)``) each get a color of their own; any entry
    in their rows is then read from their own column.  The remaining columns
    are colored greedily, in natural order, so that no two of them share a
    row of the graph with the dense columns removed.  Entry (i, j) is then
    recoverable from color(j) at row i or from color(i) at row j.  For a
    block-arrow pattern this uses k + p colors regardless of N.
    """
    n = pattern.dim
    full = pattern.full_bool().tocsr()
    full.setdiag(0)
    full.eliminate_zeros()
    degree = np.diff(full.indptr)
    if dense_cutoff is None:
        dense_cutoff = np.sqrt(2.0 * full.nnz)
    dense = degree > dense_cutoff
    color = np.full(n, -1, dtype=np.int64)
    sparse_idx = np.flatnonzero(~dense)
    # adjacency restricted to non-dense vertices
    sub = full[sparse_idx][:, sparse_idx].tocsr()
    ptr, ind = sub.indptr, sub.indices
    local = np.full(sparse_idx.size, -1, dtype=np.int64)
    for v in range(sparse_idx.size):
        forbidden = set()
        for w in ind[ptr[v] : ptr[v + 1]]:
            if local[w] >= 0:
                forbidden.add(local[w])
            for x in ind[ptr[w] : ptr[w + 1]]:
                if x != v and local[x] >= 0:
                    forbidden.add(local[x])
        c = 0
        while c in forbidden:
            c += 1
        local[v] = c
    color[sparse_idx] = local
    base = int(local.max()) + 1 if local.size else 0
    color[dense] = base + np.arange(int(dense.sum()))
    n_colors = int(color.max()) + 1 if n else 0
    return Coloring(n_colors, color)


@dataclass(frozen=True)
class _RecoveryPlan:
    rows: np.ndarray
    cols: np.ndarray
    use_col: np.ndarray  # entry read from color(col) at row
    use_row: np.ndarray  # entry read from color(row) at col


def _recovery_plan(pattern: SparsityPattern, coloring: Coloring) -> _RecoveryPlan:
    full = pattern.full_bool().tocoo()
    # counts[i, c] = number of columns of color c with a nonzero in row i
    counts = np.zeros((pattern.dim, max(coloring.n_colors, 1)), dtype=np.int64)
    np.add.at(counts, (full.row, coloring.color_of[full.col]), 1)
    rows, cols = pattern.coo()
    use_col = counts[rows, coloring.color_of[cols]] == 1
    use_row = counts[cols, coloring.color_of[rows]] == 1
    bad = ~(use_col | use_row)
    if np.any(bad):
        e = int(np.flatnonzero(bad)[0])
        raise ValueError(f"coloring cannot recover entry ({rows[e]}, {cols[e]})")
    return _RecoveryPlan(rows, cols, use_col, use_row)


def fd_hessian(
    gradient_fn: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    pattern: SparsityPattern,
    coloring: Coloring | None = None,
    step: float = 1e-5,
    g0: np.ndarray | None = None,
) -> SparseSymMatrix:
    """Hessian of the function whose gradient is ``gradient_fn``, by forward
    differences over color groups.

    Coordinate i is perturbed by ``step * max(1, |theta_i|)``.  Uses
    ``n_colors + 1`` gradient evaluations (``n_colors`` if ``g0`` is given).
    Entries observed from both sides are averaged.
    """
    theta = np.asarray(theta, dtype=float)
    if coloring is None:
        coloring = color_pattern(pattern)
    plan = _recovery_plan(pattern, coloring)
    h = step * np.maximum(1.0, np.abs(theta))
    if g0 is None:
        g0 = np.asarray(gradient_fn(theta), dtype=float)
    if not np.all(np.isfinite(g0)):
        raise NonFiniteGradient(-1)
    diffs = np.empty((coloring.n_colors, theta.size))
    for c, members in enumerate(coloring.groups()):
        t = theta.copy()
        t[members] += h[members]
        g = np.asarray(gradient_fn(t), dtype=float)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(c)
        diffs[c] = g - g0
    rows, cols = plan.rows, plan.cols
    color = coloring.color_of
    from_col = diffs[color[cols], rows] / h[cols]
    from_row = diffs[color[rows], cols] / h[rows]
    total = np.where(plan.use_col, from_col, 0.0) + np.where(plan.use_row, from_row, 0.0)
    values = total / (plan.use_col.astype(float) + plan.use_row.astype(float))
    return SparseSymMatrix(pattern, values)


# ---------------------------------------------------------------------------
# Cholesky
# ---------------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _etree(n, Up, Ui):
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Up[k], Up[k + 1]):
            i = Ui[p]
            while i != -1 and i < k:
                nxt = ancestor[i]
                ancestor[i] = k
                if nxt == -1:
                    parent[i] = k
                i = nxt
    return parent


@numba.njit(cache=True, nogil=True)
def _ereach(Up, Ui, k, parent, stack, mark):
    n = parent.size
    top = n
    mark[k] = k
    for p in range(Up[k], Up[k + 1]):
        i = Ui[p]
        if i > k:
            continue
        length = 0
        while mark[i] != k:
            stack[length] = i
            length += 1
            mark[i] = k
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            stack[top] = stack[length]
    return top


@numba.njit(cache=True, nogil=True)
def _col_counts(n, Up, Ui, parent):
    counts = np.ones(n, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Up, Ui, k, parent, stack, mark)
        for t in range(top, n):
            counts[stack[t]] += 1
    return counts


@numba.njit(cache=True, nogil=True)
def _chol_numeric(n, Up, Ui, Ux, parent, Lp):
    nnz = Lp[n]
    Li = np.empty(nnz, dtype=np.int64)
    Lx = np.empty(nnz, dtype=np.float64)
    c = Lp[:-1].copy()
    x = np.zeros(n)
    stack = np.empty(n, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Up, Ui, k, parent, stack, mark)
        x[k] = 0.0
        for p in range(Up[k], Up[k + 1]):
            if Ui[p] <= k:
                x[Ui[p]] = Ux[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = stack[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, c[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            p = c[i]
            c[i] += 1
            Li[p] = k
            Lx[p] = lki
        if not d > 0.0:
            return Li, Lx, k, d
        p = c[k]
        c[k] += 1
        Li[p] = k
        Lx[p] = np.sqrt(d)
    return Li, Lx, -1, 0.0


@numba.njit(cache=True, nogil=True)
def _lsolve(Lp, Li, Lx, b):
    # b: (n, m), overwritten with L^{-1} b
    n, m = b.shape
    for j in range(n):
        piv = Lx[Lp[j]]
        for r in range(m):
            b[j, r] /= piv
        for p in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[p]
            v = Lx[p]
            for r in range(m):
                b[i, r] -= v * b[j, r]
    return b


@numba.njit(cache=True, nogil=True)
def _ltsolve(Lp, Li, Lx, b):
    # b: (n, m), overwritten with L'^{-1} b
    n, m = b.shape
    for j in range(n - 1, -1, -1):
        for p in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[p]
            v = Lx[p]
            for r in range(m):
                b[j, r] -= v * b[i, r]
        piv = Lx[Lp[j]]
        for r in range(m):
            b[j, r] /= piv
    return b


@numba.njit(cache=True, nogil=True)
def _ltmul(Lp, Li, Lx, b):
    # returns L' b for b: (n, m)
    n, m = b.shape
    out = np.zeros((n, m))
    for j in range(n):
        for p in range(Lp[j], Lp[j + 1]):
            i = Li[p]
            v = Lx[p]
            for r in range(m):
                out[j, r] += v * b[i, r]
    return out


@dataclass(frozen=True)
class CholFactor:
    """L L' = P A P', with (P A P')[i, j] = A[perm[i], perm[j]]."""

    perm: np.ndarray
    Lp: np.ndarray
    Li: np.ndarray
    Lx: np.ndarray

    @property
    def dim(self) -> int:
        return self.perm.size

    @property
    def nnz(self) -> int:
        return int(self.Lp[-1])

    @property
    def diag(self) -> np.ndarray:
        return self.Lx[self.Lp[:-1]]

    @property
    def log_det_half(self) -> float:
        return float(np.sum(np.log(self.diag)))

    @property
    def inverse_perm(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return inv

    def L_scipy(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.Lx, self.Li, self.Lp), shape=(self.dim, self.dim))

    def lt_multiply(self, b: np.ndarray) -> np.ndarray:
        """L' b in permuted coordinates (b may be 1-D or (dim, m))."""
        b2 = np.ascontiguousarray(b, dtype=float)
        one_d = b2.ndim == 1
        out = _ltmul(self.Lp, self.Li, self.Lx, b2.reshape(self.dim, -1))
        return out[:, 0] if one_d else out


def _upper_csc(A: SparseSymMatrix) -> sp.csc_matrix:
    up = A.lower().T.tocsc()
    up.sort_indices()
    return up


def cholesky(A: SparseSymMatrix, perm: np.ndarray | None = None) -> CholFactor:
    """Sparse Cholesky factor of a symmetric positive definite matrix.

    The default ordering is the identity, which for models laid out as unit
    blocks followed by the population block keeps fill inside the border.
    """
    n = A.dim
    if perm is None:
        perm = np.arange(n, dtype=np.int64)
        B = A
    else:
        perm = np.asarray(perm, dtype=np.int64)
        B = A.permuted(perm)
    up = _upper_csc(B)
    Up = up.indptr.astype(np.int64)
    Ui = up.indices.astype(np.int64)
    Ux = up.data.astype(np.float64)
    parent = _etree(n, Up, Ui)
    counts = _col_counts(n, Up, Ui, parent)
    Lp = np.zeros(n + 1, dtype=np.int64)
    Lp[1:] = np.cumsum(counts)
    Li, Lx, bad, d = _chol_numeric(n, Up, Ui, Ux, parent, Lp)
    if bad >= 0:
        raise NotPositiveDefinite(int(perm[bad]), float(d))
    return CholFactor(perm, Lp, Li, Lx)


def solve_lt(factor: CholFactor, rhs: np.ndarray, mode: str = "full") -> np.ndarray:
    """Triangular solves with a Cholesky factor.

    ``forward`` solves L x = b and ``backward`` solves L' x = b, both in the
    permuted coordinates.  ``full`` returns A^{-1} b in the original
    coordinates.  ``rhs`` may be a vector or a (dim, m) matrix.
    """
    b = np.asarray(rhs, dtype=float)
    if b.shape[0] != factor.dim:
        raise ValueError(f"rhs has {b.shape[0]} rows, factor has dimension {factor.dim}")
    one_d = b.ndim == 1
    b2 = b.reshape(factor.dim, -1)
    if mode == "forward":
        out = _lsolve(factor.Lp, factor.Li, factor.Lx, b2.copy())
    elif mode == "backward":
        out = _ltsolve(factor.Lp, factor.Li, factor.Lx, b2.copy())
    elif mode == "full":
        work = np.ascontiguousarray(b2[factor.perm])
        _lsolve(factor.Lp, factor.Li, factor.Lx, work)
        _ltsolve(factor.Lp, factor.Li, factor.Lx, work)
        out = np.empty_like(work)
        out[factor.perm] = work
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out[:, 0] if one_d else out
