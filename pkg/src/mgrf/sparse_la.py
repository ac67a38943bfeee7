"""Sparse symmetric positive-definite linear algebra.

Storage is the lower triangle in compressed-sparse-column form. A Cholesky
factorization ``P A P^T = L L^T`` is split into a symbolic phase (ordering,
elimination tree, pattern of ``L``), cached per sparsity pattern, and a cheap
numeric phase, so refactoring a matrix whose values changed but whose pattern
did not skips all graph work.

In the original index frame the factor acts through the root ``R = P^T L``
(``A = R R^T``): ``solve_lower`` applies ``R^{-1}``, ``solve_upper`` applies
``R^{-T}``, and ``mul_lower`` / ``mul_upper`` apply ``R`` / ``R^T``.
"""
from __future__ import annotations

import enum
import hashlib
import heapq
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import _kernels as K
from .errors import DimensionMismatch, NotPositiveDefinite

PIVOT_RTOL = 1e-12


class Ordering(enum.Enum):
    NATURAL = "natural"
    BAND_REDUCING = "band"
    FILL_REDUCING = "fill"


def _as_ordering(ordering) -> Ordering:
    if isinstance(ordering, Ordering):
        return ordering
    return Ordering(str(ordering).lower())


@dataclass(frozen=True, eq=False)
class SparseSym:
    """Symmetric matrix stored by its lower triangle (CSC).

    Every column stores its diagonal entry first, then strictly-lower rows in
    ascending order. Arrays are read-only after construction.
    """

    dim: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        for name in ("indptr", "indices", "data"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    # -- construction -----------------------------------------------------
    @classmethod
    def from_scipy(cls, A) -> "SparseSym":
        """Build from any scipy sparse matrix; only the lower triangle is read."""
        A = sp.csc_matrix(A)
        n, m = A.shape
        if n != m:
            raise DimensionMismatch(f"matrix is {n}x{m}, expected square")
        low = sp.tril(A, format="coo")
        # explicit diagonal, even when zero
        diag_rows = np.arange(n)
        rows = np.concatenate([low.row, diag_rows])
        cols = np.concatenate([low.col, diag_rows])
        vals = np.concatenate([low.data, np.zeros(n)])
        M = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
        M.sum_duplicates()
        M.sort_indices()
        return cls(n, M.indptr.astype(np.int64), M.indices.astype(np.int64),
                   M.data.astype(np.float64))

    @classmethod
    def from_dense(cls, A) -> "SparseSym":
        A = np.asarray(A, dtype=float)
        return cls.from_scipy(sp.csc_matrix(np.tril(A)))

    @classmethod
    def identity(cls, n: int) -> "SparseSym":
        return cls.from_scipy(sp.identity(n, format="csc"))

    def with_data(self, data) -> "SparseSym":
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.data.shape:
            raise DimensionMismatch("value array does not match sparsity pattern")
        return SparseSym(self.dim, self.indptr, self.indices, data.copy())

    # -- views ------------------------------------------------------------
    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    def lower(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.data, self.indices, self.indptr), shape=(self.dim, self.dim))

    def to_scipy(self) -> sp.csc_matrix:
        L = self.lower()
        return (L + sp.tril(L, k=-1).T).tocsc()

    def toarray(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def diagonal(self) -> np.ndarray:
        return np.asarray(self.data[self.indptr[:-1]])

    def pattern_key(self) -> str:
        h = hashlib.sha1()
        h.update(np.int64(self.dim).tobytes())
        h.update(np.ascontiguousarray(self.indptr).tobytes())
        h.update(np.ascontiguousarray(self.indices).tobytes())
        return h.hexdigest()

    def bandwidth(self) -> int:
        cols = np.repeat(np.arange(self.dim), np.diff(self.indptr))
        return int(np.max(self.indices - cols)) if self.nnz else 0

    def __matmul__(self, x):
        return matvec(self, x)


def matvec(A: SparseSym, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (A.dim,):
        raise DimensionMismatch(f"vector of length {x.shape} for dim {A.dim}")
    return K.sym_lower_matvec(A.dim, A.indptr, A.indices, A.data, x)


def quad_form(A: SparseSym, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(x @ matvec(A, x))


# -- orderings ------------------------------------------------------------
def _adjacency(A: SparseSym) -> sp.csr_matrix:
    pattern = A.lower().copy()
    pattern.data = np.ones_like(pattern.data)
    full = (pattern + pattern.T).tocsr()
    full.setdiag(0)
    full.eliminate_zeros()
    return full


def minimum_degree(A: SparseSym) -> np.ndarray:
    """Minimum-degree elimination ordering on the explicit elimination graph.

    Ties are broken by the smallest node index, so the result is deterministic.
    """
    adj_csr = _adjacency(A)
    n = A.dim
    adj = [set(adj_csr.indices[adj_csr.indptr[i]:adj_csr.indptr[i + 1]].tolist())
           for i in range(n)]
    heap = [(len(adj[i]), i) for i in range(n)]
    heapq.heapify(heap)
    done = np.zeros(n, dtype=bool)
    order = []
    while heap:
        deg, v = heapq.heappop(heap)
        if done[v] or deg != len(adj[v]):
            continue
        done[v] = True
        order.append(v)
        nbrs = adj[v]
        for u in nbrs:
            au = adj[u]
            au.discard(v)
            au |= nbrs
            au.discard(u)
            heapq.heappush(heap, (len(au), u))
        adj[v] = set()
    return np.asarray(order, dtype=np.int64)


def band_reducing(A: SparseSym) -> np.ndarray:
    """Reverse Cuthill-McKee, falling back to the natural order when RCM
    would widen the band."""
    perm = np.asarray(reverse_cuthill_mckee(_adjacency(A), symmetric_mode=True), dtype=np.int64)
    if _permuted_bandwidth(A, perm) > A.bandwidth():
        return np.arange(A.dim, dtype=np.int64)
    return perm


def _permuted_bandwidth(A: SparseSym, perm: np.ndarray) -> int:
    pinv = np.empty_like(perm)
    pinv[perm] = np.arange(perm.size)
    cols = np.repeat(np.arange(A.dim), np.diff(A.indptr))
    return int(np.max(np.abs(pinv[A.indices] - pinv[cols]))) if A.nnz else 0


def compute_ordering(A: SparseSym, ordering=Ordering.FILL_REDUCING) -> np.ndarray:
    ordering = _as_ordering(ordering)
    if ordering is Ordering.NATURAL:
        return np.arange(A.dim, dtype=np.int64)
    if ordering is Ordering.BAND_REDUCING:
        return band_reducing(A)
    return minimum_degree(A)


# -- symbolic / numeric factorization ------------------------------------
@dataclass(frozen=True, eq=False)
class SymbolicFactor:
    """Ordering and factor structure for one sparsity pattern."""

    dim: int
    ordering: Ordering
    perm: np.ndarray          # new position k holds original index perm[k]
    pinv: np.ndarray
    Cp: np.ndarray            # permuted upper triangle, CSC
    Ci: np.ndarray
    src: np.ndarray           # C.data = A.data[src]
    Rp: np.ndarray            # row patterns of L in elimination order
    Rj: np.ndarray
    Lp: np.ndarray
    pattern_key: str

    @property
    def nnz_factor(self) -> int:
        return int(self.Lp[-1])


_SYMBOLIC_CACHE: "OrderedDict[tuple, SymbolicFactor]" = OrderedDict()
_SYMBOLIC_CACHE_SIZE = 64


def analyze(A: SparseSym, ordering=Ordering.FILL_REDUCING, perm=None) -> SymbolicFactor:
    """Symbolic analysis of ``A``'s pattern; memoized per (pattern, ordering).

    ``perm`` overrides the ordering algorithm; such analyses are not cached.
    """
    ordering = _as_ordering(ordering)
    key = (A.pattern_key(), ordering)
    cacheable = perm is None
    if cacheable:
        hit = _SYMBOLIC_CACHE.get(key)
        if hit is not None:
            _SYMBOLIC_CACHE.move_to_end(key)
            return hit
        perm = compute_ordering(A, ordering)
    perm = np.asarray(perm, dtype=np.int64)
    n = A.dim
    pinv = np.empty(n, dtype=np.int64)
    pinv[perm] = np.arange(n)

    cols = np.repeat(np.arange(n, dtype=np.int64), np.diff(A.indptr))
    pi = pinv[A.indices]
    pj = pinv[cols]
    ucol = np.maximum(pi, pj)
    urow = np.minimum(pi, pj)
    src = np.lexsort((urow, ucol)).astype(np.int64)
    Ci = urow[src]
    Cp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(ucol, minlength=n), out=Cp[1:])

    parent = K.etree(n, Cp, Ci)
    Rp, Rj, counts = K.row_patterns(n, Cp, Ci, parent)
    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=Lp[1:])
    sym = SymbolicFactor(n, ordering, perm, pinv, Cp, Ci, src, Rp, Rj, Lp, key[0])
    if cacheable:
        _SYMBOLIC_CACHE[key] = sym
        if len(_SYMBOLIC_CACHE) > _SYMBOLIC_CACHE_SIZE:
            _SYMBOLIC_CACHE.popitem(last=False)
    return sym


@dataclass(frozen=True, eq=False)
class CholFactor:
    """Numeric factor ``P A P^T = L L^T`` (``L`` lower CSC, positive diagonal)."""

    dim: int
    perm: np.ndarray
    Lp: np.ndarray
    Li: np.ndarray
    Lx: np.ndarray
    symbolic: SymbolicFactor = field(repr=False)

    def _check(self, b):
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.dim:
            raise DimensionMismatch(f"right-hand side of length {b.shape[0]} for dim {self.dim}")
        return b

    @property
    def lower(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.Lx, self.Li, self.Lp), shape=(self.dim, self.dim))

    def diag(self) -> np.ndarray:
        return self.Lx[self.Lp[:-1]]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(self.diag())))

    def solve_lower(self, b) -> np.ndarray:
        """``R^{-1} b = L^{-1} P b``."""
        b = self._check(b)
        if b.ndim == 2:
            return K.lsolve_mat(self.dim, self.Lp, self.Li, self.Lx,
                                np.ascontiguousarray(b[self.perm]))
        return K.lsolve(self.dim, self.Lp, self.Li, self.Lx, b[self.perm])

    def solve_upper(self, b) -> np.ndarray:
        """``R^{-T} b = P^T L^{-T} b``."""
        b = self._check(b)
        if b.ndim == 2:
            return np.column_stack([self.solve_upper(b[:, j]) for j in range(b.shape[1])])
        out = np.empty(self.dim)
        out[self.perm] = K.ltsolve(self.dim, self.Lp, self.Li, self.Lx, b)
        return out

    def solve_full(self, b) -> np.ndarray:
        """``A^{-1} b``."""
        b = self._check(b)
        if b.ndim == 2:
            return np.column_stack([self.solve_full(b[:, j]) for j in range(b.shape[1])])
        y = K.lsolve(self.dim, self.Lp, self.Li, self.Lx, b[self.perm])
        out = np.empty(self.dim)
        out[self.perm] = K.ltsolve(self.dim, self.Lp, self.Li, self.Lx, y)
        return out

    def mul_lower(self, x) -> np.ndarray:
        """``R x = P^T L x``."""
        x = self._check(x)
        if x.ndim == 2:
            return np.column_stack([self.mul_lower(x[:, j]) for j in range(x.shape[1])])
        out = np.empty(self.dim)
        out[self.perm] = K.lmul(self.dim, self.Lp, self.Li, self.Lx, x)
        return out

    def mul_upper(self, x) -> np.ndarray:
        """``R^T x = L^T P x``."""
        x = self._check(x)
        if x.ndim == 2:
            return np.column_stack([self.mul_upper(x[:, j]) for j in range(x.shape[1])])
        return K.ltmul(self.dim, self.Lp, self.Li, self.Lx, x[self.perm])

    def sample(self, rng, mean=None) -> np.ndarray:
        return sample_gmrf(self, mean, rng)

    def scaled(self, c: float) -> "CholFactor":
        """Factor of ``c * A`` for ``c > 0`` without refactoring."""
        return CholFactor(self.dim, self.perm, self.Lp, self.Li, self.Lx * np.sqrt(c),
                          self.symbolic)

    def lower_bandwidth(self) -> int:
        cols = np.repeat(np.arange(self.dim), np.diff(self.Lp))
        return int(np.max(self.Li - cols)) if self.Li.size else 0


def factorize(A: SparseSym, ordering=Ordering.FILL_REDUCING,
              symbolic: SymbolicFactor | None = None) -> CholFactor:
    """Cholesky factorization with a fill- or band-reducing permutation.

    Raises NotPositiveDefinite when a pivot drops to ``1e-12 * max(diag(A))``
    or below.
    """
    if symbolic is None:
        symbolic = analyze(A, ordering)
    elif symbolic.dim != A.dim or symbolic.Cp[-1] != A.nnz:
        raise DimensionMismatch("symbolic analysis belongs to a different pattern")
    diag = A.data[A.indptr[:-1]]
    dmax = float(np.max(diag)) if A.dim else 0.0
    if not dmax > 0.0:
        raise NotPositiveDefinite(int(np.argmax(diag <= 0)) if A.dim else 0)
    tol = PIVOT_RTOL * dmax
    Cx = A.data[symbolic.src]
    nnz = symbolic.nnz_factor
    Li = np.empty(nnz, dtype=np.int64)
    Lx = np.empty(nnz)
    status = K.numeric_chol(A.dim, symbolic.Cp, symbolic.Ci, Cx, symbolic.Rp, symbolic.Rj,
                            symbolic.Lp, Li, Lx, tol)
    if status >= 0:
        raise NotPositiveDefinite(int(status))
    return CholFactor(A.dim, symbolic.perm, symbolic.Lp, Li, Lx, symbolic)


def solve_lower(F: CholFactor, b) -> np.ndarray:
    return F.solve_lower(b)


def solve_upper(F: CholFactor, b) -> np.ndarray:
    return F.solve_upper(b)


def solve_full(F: CholFactor, b) -> np.ndarray:
    return F.solve_full(b)


def logdet(F: CholFactor) -> float:
    return F.logdet()


def sample_gmrf(F: CholFactor, mean, rng) -> np.ndarray:
    """Exact draw from ``N(mean, A^{-1})`` where ``F`` factors the precision ``A``."""
    u = rng.standard_normal(F.dim)
    x = F.solve_upper(u)
    if mean is not None:
        mean = np.asarray(mean, dtype=np.float64)
        if mean.shape != (F.dim,):
            raise DimensionMismatch(f"mean of length {mean.shape} for dim {F.dim}")
        x += mean
    return x


# -- MatrixMarket ---------------------------------------------------------
def write_matrix_market(path, A: SparseSym) -> None:
    scipy.io.mmwrite(str(path), A.lower().tocoo(), symmetry="symmetric")


def read_matrix_market(path) -> SparseSym:
    M = scipy.io.mmread(str(Path(path)))
    return SparseSym.from_scipy(sp.csc_matrix(M))
