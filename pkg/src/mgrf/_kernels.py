"""Compiled kernels for the sparse Cholesky factorization and triangular algebra.

Conventions: the matrix to factor is given by its *upper* triangle in CSC
form (column k holds rows i <= k), which is the lower triangle read row-wise.
The factor L is lower triangular CSC with the diagonal entry stored first in
every column and row indices ascending.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def etree(n, Cp, Ci):
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Cp[k], Cp[k + 1]):
            i = Ci[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@njit(cache=True)
def row_patterns(n, Cp, Ci, parent):
    """Nonzero pattern of every row of L (excluding the diagonal).

    Row k is returned in the topological order produced by the elimination
    tree reach, which is the order the numeric phase must visit it in.
    """
    mark = np.full(n, -1, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    counts = np.ones(n, dtype=np.int64)
    # first pass: sizes
    total = 0
    for k in range(n):
        mark[k] = k
        for p in range(Cp[k], Cp[k + 1]):
            i = Ci[p]
            if i > k:
                continue
            while mark[i] != k:
                mark[i] = k
                total += 1
                counts[i] += 1
                i = parent[i]
    Rp = np.zeros(n + 1, dtype=np.int64)
    Rj = np.empty(total, dtype=np.int64)
    mark[:] = -1
    pos = 0
    for k in range(n):
        top = n
        mark[k] = k
        for p in range(Cp[k], Cp[k + 1]):
            i = Ci[p]
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
        for t in range(top, n):
            Rj[pos] = stack[t]
            pos += 1
        Rp[k + 1] = pos
    return Rp, Rj, counts


@njit(cache=True)
def numeric_chol(n, Cp, Ci, Cx, Rp, Rj, Lp, Li, Lx, tol):
    """Up-looking numeric factorization into preallocated (Li, Lx).

    Returns -1 on success or the permuted column index of the failing pivot.
    """
    x = np.zeros(n)
    nxt = Lp[:n].copy()
    for k in range(n):
        for p in range(Cp[k], Cp[k + 1]):
            i = Ci[p]
            if i <= k:
                x[i] = Cx[p]
        d = x[k]
        x[k] = 0.0
        for t in range(Rp[k], Rp[k + 1]):
            i = Rj[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, nxt[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            p = nxt[i]
            nxt[i] += 1
            Li[p] = k
            Lx[p] = lki
        if not d > tol:
            return k
        p = nxt[k]
        nxt[k] += 1
        Li[p] = k
        Lx[p] = np.sqrt(d)
    return -1


@njit(cache=True)
def lsolve(n, Lp, Li, Lx, b):
    x = b.copy()
    for j in range(n):
        x[j] /= Lx[Lp[j]]
        xj = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            x[Li[p]] -= Lx[p] * xj
    return x


@njit(cache=True)
def ltsolve(n, Lp, Li, Lx, b):
    x = b.copy()
    for j in range(n - 1, -1, -1):
        s = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            s -= Lx[p] * x[Li[p]]
        x[j] = s / Lx[Lp[j]]
    return x


@njit(cache=True)
def lsolve_mat(n, Lp, Li, Lx, B):
    X = B.copy()
    m = B.shape[1]
    for j in range(n):
        d = Lx[Lp[j]]
        for c in range(m):
            X[j, c] /= d
        for p in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[p]
            v = Lx[p]
            for c in range(m):
                X[i, c] -= v * X[j, c]
    return X


@njit(cache=True)
def lmul(n, Lp, Li, Lx, x):
    y = np.zeros(n)
    for j in range(n):
        xj = x[j]
        for p in range(Lp[j], Lp[j + 1]):
            y[Li[p]] += Lx[p] * xj
    return y


@njit(cache=True)
def ltmul(n, Lp, Li, Lx, x):
    y = np.zeros(n)
    for j in range(n):
        s = 0.0
        for p in range(Lp[j], Lp[j + 1]):
            s += Lx[p] * x[Li[p]]
        y[j] = s
    return y


@njit(cache=True)
def sym_lower_matvec(n, Ap, Ai, Ax, x):
    y = np.zeros(n)
    for j in range(n):
        xj = x[j]
        for p in range(Ap[j], Ap[j + 1]):
            i = Ai[p]
            v = Ax[p]
            y[i] += v * xj
            if i != j:
                y[j] += v * x[i]
    return y
