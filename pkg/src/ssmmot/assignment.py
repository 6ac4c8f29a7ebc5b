"""Rectangular linear assignment (Hungarian / shortest augmenting path).

Forbidden pairs are marked with ``inf``. The solver first maximizes the number
of allowed pairs, then minimizes their total cost; rows that cannot be given an
allowed column come back unassigned (``-1``) rather than raising.
"""

from __future__ import annotations

import numpy as np


def _solve_square_or_wide(cost: np.ndarray) -> np.ndarray:
    """Potentials-based Hungarian for ``n <= m``; returns column per row."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)   # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    out = np.full(n, -1, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            out[p[j] - 1] = j - 1
    return out


def hungarian(cost) -> np.ndarray:
    """Optimal assignment for a rectangular cost matrix.

    Returns an int array ``row -> column`` with ``-1`` for unassigned rows.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    n, m = cost.shape
    if n == 0 or m == 0:
        return np.full(n, -1, dtype=int)
    if np.isnan(cost).any() or np.isneginf(cost).any():
        raise ValueError("cost entries must be finite or +inf")
    forbidden = np.isposinf(cost)
    if forbidden.all():
        return np.full(n, -1, dtype=int)
    finite = cost[~forbidden]
    lo, hi = float(finite.min()), float(finite.max())
    # one extra forbidden pair must outweigh any spread of finite costs
    big = hi + (hi - lo + 1.0) * (min(n, m) + 1)
    work = np.where(forbidden, big, cost)
    if n <= m:
        row_to_col = _solve_square_or_wide(work)
    else:
        col_to_row = _solve_square_or_wide(work.T)
        row_to_col = np.full(n, -1, dtype=int)
        for c, r in enumerate(col_to_row):
            if r >= 0:
                row_to_col[r] = c
    for r, c in enumerate(row_to_col):
        if c >= 0 and forbidden[r, c]:
            row_to_col[r] = -1
    return row_to_col


def matches(cost) -> list[tuple[int, int]]:
    """Assigned ``(row, col)`` pairs in row order."""
    return [(r, int(c)) for r, c in enumerate(hungarian(cost)) if c >= 0]


def assignment_cost(cost, row_to_col) -> float:
    cost = np.asarray(cost, dtype=float)
    return float(sum(cost[r, c] for r, c in enumerate(row_to_col) if c >= 0))
