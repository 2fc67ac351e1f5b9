# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: rectangular assignment and Euclidean silhouette."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, fabs, sqrt
from libc.stdlib cimport free, malloc

cnp.import_array()


cdef double _hungarian(const double[:, ::1] cost, int* rows, int n,
                       int* cols, int m, int* out, double* work, int* iwork) nogil:
    # work: u(n+1) v(m+1) minv(m+1); iwork: p(m+1) way(m+1) used(m+1)
    cdef double* u = work
    cdef double* v = work + n + 1
    cdef double* minv = work + n + m + 2
    cdef int* p = iwork
    cdef int* way = iwork + m + 1
    cdef int* used = iwork + 2 * m + 2
    cdef int i, j, j0, j1, i0, row
    cdef double delta, cur, total
    for i in range(n + 1):
        u[i] = 0.0
    for j in range(m + 1):
        v[j] = 0.0
        p[j] = 0
        way[j] = 0
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            row = rows[i0 - 1]
            delta = INFINITY
            j1 = -1
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[row, cols[j - 1]] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    for j in range(1, m + 1):
        if p[j]:
            out[p[j] - 1] = cols[j - 1]
    total = 0.0
    for i in range(n):
        total += cost[rows[i], out[i]]
    return total


cdef int _solve(const double[:, ::1] cost, int n_rows, int n_cols,
                long long* chosen, double* total_out) nogil:
    cdef int size = n_rows + n_cols + 4
    cdef double* work = <double*> malloc(3 * size * sizeof(double))
    cdef int* iwork = <int*> malloc(4 * size * sizeof(int))
    cdef int* rows = <int*> malloc(size * sizeof(int))
    cdef int* free_cols = <int*> malloc(size * sizeof(int))
    cdef int* remaining = <int*> malloc(size * sizeof(int))
    cdef int* out = <int*> malloc(size * sizeof(int))
    cdef int r, j, q, n_free, n_rem, col
    cdef double best, tol, prefix, cand, total
    cdef int found
    for r in range(n_rows):
        rows[r] = r
    for j in range(n_cols):
        free_cols[j] = j
    n_free = n_cols
    best = _hungarian(cost, rows, n_rows, free_cols, n_free, out, work, iwork)
    tol = 1e-9 * (1.0 + fabs(best))
    prefix = 0.0
    for r in range(n_rows):
        found = 0
        for q in range(n_free):
            col = free_cols[q]
            n_rem = 0
            for j in range(n_free):
                if j != q:
                    remaining[n_rem] = free_cols[j]
                    n_rem += 1
            cand = prefix + cost[r, col]
            if r + 1 < n_rows:
                cand = cand + _hungarian(cost, rows + r + 1, n_rows - r - 1,
                                         remaining, n_rem, out, work, iwork)
            if cand <= best + tol:
                chosen[r] = col
                prefix += cost[r, col]
                for j in range(n_rem):
                    free_cols[j] = remaining[j]
                n_free = n_rem
                found = 1
                break
        if not found:
            break
    total = 0.0
    for r in range(n_rows):
        total += cost[r, chosen[r]]
    total_out[0] = total
    free(work)
    free(iwork)
    free(rows)
    free(free_cols)
    free(remaining)
    free(out)
    return found if n_rows > 0 else 1


def solve_assignment(cost):
    """Lexicographically smallest minimum-cost injective row->column map."""
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef int n_rows = c.shape[0]
    cdef int n_cols = c.shape[1]
    if n_rows > n_cols:
        raise ValueError(f"cannot assign {n_rows} rows to {n_cols} columns")
    chosen = np.zeros(n_rows, dtype=np.int64)
    cdef long long[::1] ch = chosen
    cdef double total = 0.0
    if n_rows == 0:
        return chosen, 0.0
    if not _solve(c, n_rows, n_cols, &ch[0], &total):
        raise RuntimeError("assignment refinement failed")
    return chosen, total


def match_batch(costs, n_rows):
    """Batched ``solve_assignment`` over a padded (B, R_max, K) array."""
    cdef double[:, :, ::1] c = np.ascontiguousarray(costs, dtype=np.float64)
    cdef long long[::1] nr = np.ascontiguousarray(n_rows, dtype=np.int64)
    cdef Py_ssize_t b = c.shape[0], r_max = c.shape[1], k = c.shape[2]
    out = np.full((b, r_max), -1, dtype=np.int64)
    totals = np.zeros(b, dtype=np.float64)
    cdef long long[:, ::1] o = out
    cdef double[::1] t = totals
    cdef Py_ssize_t i
    cdef int ok = 1
    for i in range(b):
        if nr[i] > k or nr[i] > r_max:
            raise ValueError(f"cannot assign {nr[i]} rows to {k} columns")
    with nogil:
        for i in range(b):
            if nr[i] == 0:
                continue
            ok = _solve(c[i], <int> nr[i], <int> k, &o[i, 0], &t[i])
            if not ok:
                break
    if not ok:
        raise RuntimeError("assignment refinement failed")
    return out, totals


def silhouette_samples(x, labels):
    """Per-point Euclidean silhouette; O(N^2 d) time, O(N * C) memory."""
    cdef double[:, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    classes, inv_np = np.unique(np.asarray(labels, dtype=np.int64), return_inverse=True)
    cdef long long[::1] inv = np.ascontiguousarray(inv_np, dtype=np.int64)
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], n_classes = len(classes)
    counts_np = np.bincount(inv_np, minlength=n_classes).astype(np.float64)
    cdef double[::1] counts = counts_np
    sums_np = np.zeros((n, n_classes), dtype=np.float64)
    cdef double[:, ::1] sums = sums_np
    out_np = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_np
    cdef Py_ssize_t i, j, f, c, own
    cdef double acc, diff, dist, a, b, denom
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                acc = 0.0
                for f in range(d):
                    diff = X[i, f] - X[j, f]
                    acc = acc + diff * diff
                dist = sqrt(acc)
                sums[i, inv[j]] += dist
                sums[j, inv[i]] += dist
        for i in range(n):
            own = inv[i]
            if counts[own] <= 1.0:
                continue
            a = sums[i, own] / (counts[own] - 1.0)
            b = INFINITY
            for c in range(n_classes):
                if c != own and sums[i, c] / counts[c] < b:
                    b = sums[i, c] / counts[c]
            denom = a if a > b else b
            out[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return out_np
