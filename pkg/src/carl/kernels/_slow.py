"""Pure-Python reference kernels.

Used when the compiled extension is unavailable or ``CARL_FORCE_PYTHON=1``.
Semantics are identical to ``_fast.pyx``; the test-suite runs both.
"""

import math

import numpy as np

_INF = float("inf")


def _hungarian(cost, rows, cols):
    """Minimum-cost assignment of every row in ``rows`` to a distinct column.

    Shortest augmenting path with potentials (Kuhn-Munkres), O(r^2 c).
    Returns the list of chosen columns, aligned with ``rows``.
    """
    n = len(rows)
    m = len(cols)
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [_INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = rows[i0 - 1]
            delta = _INF
            j1 = -1
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[row][cols[j - 1]] - u[i0] - v[j]
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
    out = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            out[p[j] - 1] = cols[j - 1]
    return out


def _subproblem_cost(cost, rows, cols):
    if not rows:
        return 0.0
    assign = _hungarian(cost, rows, cols)
    total = 0.0
    for r, c in zip(rows, assign):
        total += cost[r][c]
    return total


def solve_assignment(cost):
    """Assign each row of ``cost`` (R x K, R <= K) to a distinct column.

    Among all minimum-cost injective maps, returns the lexicographically
    smallest column sequence. Returns ``(cols, total)``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n_rows, n_cols = cost.shape
    if n_rows > n_cols:
        raise ValueError(f"cannot assign {n_rows} rows to {n_cols} columns")
    if n_rows == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    c = cost.tolist()
    all_rows = list(range(n_rows))
    free = list(range(n_cols))
    best = _subproblem_cost(c, all_rows, free)
    tol = 1e-9 * (1.0 + abs(best))
    chosen = []
    prefix = 0.0
    for r in range(n_rows):
        rest = all_rows[r + 1:]
        for col in free:
            remaining = [x for x in free if x != col]
            cand = prefix + c[r][col] + _subproblem_cost(c, rest, remaining)
            if cand <= best + tol:
                chosen.append(col)
                prefix += c[r][col]
                free = remaining
                break
        else:  # pragma: no cover - unreachable for finite costs
            raise RuntimeError("assignment refinement failed")
    total = 0.0
    for r, col in enumerate(chosen):
        total += c[r][col]
    return np.asarray(chosen, dtype=np.int64), total


def match_batch(costs, n_rows):
    """Solve ``B`` padded problems. ``costs`` is (B, R_max, K); row counts per item.

    Returns (B, R_max) int64 columns, ``-1`` beyond each item's row count,
    and the (B,) totals.
    """
    costs = np.asarray(costs, dtype=np.float64)
    n_rows = np.asarray(n_rows, dtype=np.int64)
    b, r_max, _ = costs.shape
    out = np.full((b, r_max), -1, dtype=np.int64)
    totals = np.zeros(b, dtype=np.float64)
    for i in range(b):
        r = int(n_rows[i])
        cols, total = solve_assignment(costs[i, :r])
        out[i, :r] = cols
        totals[i] = total
    return out, totals


def silhouette_samples(x, labels):
    """Per-point Euclidean silhouette values.

    Points whose class has a single member get 0, as do points with
    ``a == b == 0``. Memory stays O(N * block).
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    classes, inv = np.unique(labels, return_inverse=True)
    n_classes = len(classes)
    counts = np.bincount(inv, minlength=n_classes).astype(np.float64)
    sums = np.zeros((n, n_classes), dtype=np.float64)
    block = max(1, (1 << 22) // max(1, n * x.shape[1]))
    for start in range(0, n, block):
        stop = min(n, start + block)
        diff = x[start:stop, None, :] - x[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        for c in range(n_classes):
            sums[start:stop, c] = d[:, inv == c].sum(axis=1)
    out = np.zeros(n, dtype=np.float64)
    for i in range(n):
        own = inv[i]
        if counts[own] <= 1:
            continue
        a = sums[i, own] / (counts[own] - 1.0)
        b = math.inf
        for c in range(n_classes):
            if c != own:
                b = min(b, sums[i, c] / counts[c])
        denom = max(a, b)
        out[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return out
