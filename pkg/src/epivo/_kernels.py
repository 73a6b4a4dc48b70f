"""Hot inner loops, each in a pure-numpy and a numba flavour.

The public names at the bottom point at the numba versions unless numba is
missing or ``EPIVO_NUMBA=0`` is set in the environment before import.  Both
flavours are importable directly (``*_np`` / ``*_nb``) so tests can check
parity and ``benchmarks/bench_kernels.py`` can time them side by side.
"""

from __future__ import annotations

import os

import numpy as np

from .constants import TOL

_DEN_EPS = TOL.sampson_denominator

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("EPIVO_NUMBA", "1").strip().lower() not in (
    "0",
    "false",
    "no",
    "off",
)
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# Log-domain Sinkhorn
# ---------------------------------------------------------------------------


def _lse_rows_np(x):
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def sinkhorn_log_np(logits, log_r, log_c, iterations):
    """Return potentials ``(f, g)`` and the per-iteration L1 row-marginal residual.

    ``exp(logits + f[:, None] + g[None, :])`` has column sums ``exp(log_c)``
    exactly after every iteration; rows converge to ``exp(log_r)``.
    """
    n1, n2 = logits.shape
    f = np.zeros(n1)
    g = np.zeros(n2)
    residuals = np.empty(iterations)
    r = np.exp(log_r)
    for it in range(iterations):
        f = log_r - _lse_rows_np(logits + g[None, :])
        g = log_c - _lse_rows_np((logits + f[:, None]).T)
        rows = np.exp(logits + f[:, None] + g[None, :]).sum(axis=1)
        residuals[it] = np.abs(rows - r).sum()
    return f, g, residuals


@njit(cache=True)
def sinkhorn_log_nb(logits, log_r, log_c, iterations):
    n1, n2 = logits.shape
    f = np.zeros(n1)
    g = np.zeros(n2)
    residuals = np.empty(iterations)
    for it in range(iterations):
        for i in range(n1):
            m = -np.inf
            for j in range(n2):
                v = logits[i, j] + g[j]
                if v > m:
                    m = v
            s = 0.0
            for j in range(n2):
                s += np.exp(logits[i, j] + g[j] - m)
            f[i] = log_r[i] - (m + np.log(s))
        for j in range(n2):
            m = -np.inf
            for i in range(n1):
                v = logits[i, j] + f[i]
                if v > m:
                    m = v
            s = 0.0
            for i in range(n1):
                s += np.exp(logits[i, j] + f[i] - m)
            g[j] = log_c[j] - (m + np.log(s))
        res = 0.0
        for i in range(n1):
            s = 0.0
            for j in range(n2):
                s += np.exp(logits[i, j] + f[i] + g[j])
            res += abs(s - np.exp(log_r[i]))
        residuals[it] = res
    return f, g, residuals


# ---------------------------------------------------------------------------
# Minimum spanning tree (Prim, lexicographic edge order)
# ---------------------------------------------------------------------------


def _key_less(w1, a1, b1, w2, a2, b2):
    if w1 != w2:
        return w1 < w2
    if a1 != a2:
        return a1 < a2
    return b1 < b2


_key_less_nb = njit(cache=True)(_key_less)


def prim_mst_np(points):
    """MST edges of the complete Euclidean graph, ordered as added.

    Edges compare by ``(length, min index, max index)``; under that strict
    total order the minimum tree is unique, which makes the result
    independent of the traversal.
    """
    n = points.shape[0]
    edges = np.empty((max(n - 1, 0), 2), dtype=np.int64)
    if n <= 1:
        return edges
    in_tree = np.zeros(n, dtype=bool)
    best_w = np.full(n, np.inf)
    best_a = np.full(n, n, dtype=np.int64)
    best_b = np.full(n, n, dtype=np.int64)
    idx = np.arange(n)
    u = 0
    for step in range(n - 1):
        in_tree[u] = True
        diff = points - points[u]
        d = np.sqrt((diff * diff).sum(axis=1))
        a = np.minimum(idx, u)
        b = np.maximum(idx, u)
        better = (d < best_w) | ((d == best_w) & ((a < best_a) | ((a == best_a) & (b < best_b))))
        better &= ~in_tree
        best_w[better] = d[better]
        best_a[better] = a[better]
        best_b[better] = b[better]
        out = np.flatnonzero(~in_tree)
        order = np.lexsort((best_b[out], best_a[out], best_w[out]))
        v = out[order[0]]
        edges[step, 0] = best_a[v]
        edges[step, 1] = best_b[v]
        u = v
    return edges


@njit(cache=True)
def prim_mst_nb(points):
    n = points.shape[0]
    edges = np.empty((max(n - 1, 0), 2), dtype=np.int64)
    if n <= 1:
        return edges
    dim = points.shape[1]
    in_tree = np.zeros(n, dtype=np.bool_)
    best_w = np.full(n, np.inf)
    best_a = np.full(n, n, dtype=np.int64)
    best_b = np.full(n, n, dtype=np.int64)
    u = 0
    for step in range(n - 1):
        in_tree[u] = True
        for v in range(n):
            if in_tree[v]:
                continue
            s = 0.0
            for c in range(dim):
                dd = points[v, c] - points[u, c]
                s += dd * dd
            d = np.sqrt(s)
            a = min(u, v)
            b = max(u, v)
            if _key_less_nb(d, a, b, best_w[v], best_a[v], best_b[v]):
                best_w[v] = d
                best_a[v] = a
                best_b[v] = b
        nxt = -1
        for v in range(n):
            if in_tree[v]:
                continue
            if nxt < 0 or _key_less_nb(best_w[v], best_a[v], best_b[v], best_w[nxt], best_a[nxt], best_b[nxt]):
                nxt = v
        edges[step, 0] = best_a[nxt]
        edges[step, 1] = best_b[nxt]
        u = nxt
    return edges


# ---------------------------------------------------------------------------
# k nearest neighbours (stable: distance ties go to the lower index)
# ---------------------------------------------------------------------------


def knn_np(points, k):
    n = points.shape[0]
    kk = min(k, n - 1)
    if kk <= 0:
        return np.empty((n, 0), dtype=np.int64)
    d = np.empty((n, n))
    for i in range(n):
        diff = points - points[i]
        d[i] = np.sqrt((diff * diff).sum(axis=1))
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :kk].astype(np.int64)


@njit(cache=True)
def knn_nb(points, k):
    n = points.shape[0]
    dim = points.shape[1]
    kk = min(k, n - 1)
    if kk <= 0:
        return np.empty((n, 0), dtype=np.int64)
    out = np.empty((n, kk), dtype=np.int64)
    row = np.empty(n)
    for i in range(n):
        for j in range(n):
            s = 0.0
            for c in range(dim):
                dd = points[j, c] - points[i, c]
                s += dd * dd
            row[j] = np.sqrt(s)
        row[i] = np.inf
        order = np.argsort(row, kind="mergesort")
        for m in range(kk):
            out[i, m] = order[m]
    return out


# ---------------------------------------------------------------------------
# Linear (DLT) triangulation
# ---------------------------------------------------------------------------


def triangulate_dlt_np(P1, P2, x1, x2):
    """Homogeneous points (n, 4), unit norm, last coordinate made nonnegative."""
    n = x1.shape[0]
    A = np.empty((n, 4, 4))
    A[:, 0] = x1[:, 0:1] * P1[2] - P1[0]
    A[:, 1] = x1[:, 1:2] * P1[2] - P1[1]
    A[:, 2] = x2[:, 0:1] * P2[2] - P2[0]
    A[:, 3] = x2[:, 1:2] * P2[2] - P2[1]
    X = np.linalg.svd(A)[2][:, -1, :]
    X *= np.where(X[:, 3] < 0, -1.0, 1.0)[:, None]
    return X


@njit(cache=True)
def triangulate_dlt_nb(P1, P2, x1, x2):
    n = x1.shape[0]
    X = np.empty((n, 4))
    A = np.empty((4, 4))
    for i in range(n):
        for c in range(4):
            A[0, c] = x1[i, 0] * P1[2, c] - P1[0, c]
            A[1, c] = x1[i, 1] * P1[2, c] - P1[1, c]
            A[2, c] = x2[i, 0] * P2[2, c] - P2[0, c]
            A[3, c] = x2[i, 1] * P2[2, c] - P2[1, c]
        vt = np.linalg.svd(A)[2]
        sgn = -1.0 if vt[3, 3] < 0 else 1.0
        for c in range(4):
            X[i, c] = sgn * vt[3, c]
    return X


# ---------------------------------------------------------------------------
# Sampson distance for a stack of models
# ---------------------------------------------------------------------------


def sampson_many_np(Es, x1, x2):
    """Sampson distances (m, n) of n homogeneous pairs under m 3x3 models.

    Degenerate denominators give a zero distance and ``False`` in the mask.
    """
    Ex1 = np.einsum("mij,nj->mni", Es, x1)
    Etx2 = np.einsum("mji,nj->mni", Es, x2)
    num = np.einsum("ni,mni->mn", x2, Ex1) ** 2
    den = Ex1[..., 0] ** 2 + Ex1[..., 1] ** 2 + Etx2[..., 0] ** 2 + Etx2[..., 1] ** 2
    valid = den > _DEN_EPS
    d = np.where(valid, num / np.where(valid, den, 1.0), 0.0)
    return d, valid


@njit(cache=True)
def sampson_many_nb(Es, x1, x2):
    m = Es.shape[0]
    n = x1.shape[0]
    d = np.zeros((m, n))
    valid = np.zeros((m, n), dtype=np.bool_)
    for h in range(m):
        E = Es[h]
        for i in range(n):
            a0 = E[0, 0] * x1[i, 0] + E[0, 1] * x1[i, 1] + E[0, 2] * x1[i, 2]
            a1 = E[1, 0] * x1[i, 0] + E[1, 1] * x1[i, 1] + E[1, 2] * x1[i, 2]
            a2 = E[2, 0] * x1[i, 0] + E[2, 1] * x1[i, 1] + E[2, 2] * x1[i, 2]
            b0 = E[0, 0] * x2[i, 0] + E[1, 0] * x2[i, 1] + E[2, 0] * x2[i, 2]
            b1 = E[0, 1] * x2[i, 0] + E[1, 1] * x2[i, 1] + E[2, 1] * x2[i, 2]
            r = x2[i, 0] * a0 + x2[i, 1] * a1 + x2[i, 2] * a2
            den = a0 * a0 + a1 * a1 + b0 * b0 + b1 * b1
            if den > _DEN_EPS:
                d[h, i] = r * r / den
                valid[h, i] = True
    return d, valid


if USE_NUMBA:
    sinkhorn_log = sinkhorn_log_nb
    prim_mst = prim_mst_nb
    knn = knn_nb
    triangulate_dlt = triangulate_dlt_nb
    sampson_many = sampson_many_nb
else:
    sinkhorn_log = sinkhorn_log_np
    prim_mst = prim_mst_np
    knn = knn_np
    triangulate_dlt = triangulate_dlt_np
    sampson_many = sampson_many_np
