"""Minimum-cost bipartite assignment.

Costs are plain 2-D float arrays (rows x cols). ``np.inf`` marks a pair that
must never be matched. The solver maximizes the number of finite matches and,
among those, minimizes total cost. Ties between optimal assignments are
broken lexicographically: lowest row first, and for that row the lowest
column.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

MAX_ORACLE_SIZE = 8


@dataclass
class AssignmentResult:
    matches: list[tuple[int, int]] = field(default_factory=list)
    unmatched_rows: list[int] = field(default_factory=list)
    unmatched_cols: list[int] = field(default_factory=list)

    def total_cost(self, costs) -> float:
        costs = np.asarray(costs, dtype=float)
        return float(sum(costs[r, c] for r, c in self.matches))


def _as_matrix(costs) -> np.ndarray:
    m = np.asarray(costs, dtype=float)
    if m.ndim != 2:
        if m.size == 0:
            return m.reshape(0, 0)
        raise ValueError(f"cost matrix must be 2-D, got shape {m.shape}")
    if np.isnan(m).any():
        raise ValueError("cost matrix contains NaN")
    finite = m[np.isfinite(m)]
    if (finite < 0).any() or np.isneginf(m).any():
        raise ValueError("finite costs must be >= 0")
    return m


def _result_from_pairs(pairs, n_rows, n_cols) -> AssignmentResult:
    pairs = sorted(pairs)
    used_r = {r for r, _ in pairs}
    used_c = {c for _, c in pairs}
    return AssignmentResult(
        matches=pairs,
        unmatched_rows=[r for r in range(n_rows) if r not in used_r],
        unmatched_cols=[c for c in range(n_cols) if c not in used_c],
    )


def _hungarian_square(a: np.ndarray):
    """Shortest augmenting path Hungarian method on a square matrix.

    Returns ``(row_to_col, u, v)`` where ``u``/``v`` are the dual potentials.
    """
    n = a.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row (1-based) assigned to column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.zeros(n, dtype=int)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _alternating_path(tight, row_to_col, col_to_row, start_row, target_col, fixed_rows, fixed_cols):
    """BFS for an alternating path from ``start_row`` that frees ``target_col``.

    Walks row -> tight col -> that col's current row ... and stops when it
    reaches ``target_col``. Returns the list of (row, new_col) reassignments
    or None.
    """
    prev = {}
    queue = [start_row]
    seen_cols = {int(row_to_col[start_row])}
    while queue:
        nxt = []
        for r in queue:
            for c in np.flatnonzero(tight[r]):
                c = int(c)
                if c in seen_cols or fixed_cols[c] or c == row_to_col[r]:
                    continue
                seen_cols.add(c)
                prev[c] = r
                if c == target_col:
                    path = []
                    while True:
                        r_ = prev[c]
                        path.append((r_, c))
                        if r_ == start_row:
                            return path
                        c = int(row_to_col[r_])
                owner = int(col_to_row[c])
                if not fixed_rows[owner]:
                    nxt.append(owner)
        queue = nxt
    return None


def _lexicographic_optimum(a: np.ndarray, row_to_col, u, v, real):
    """Among assignments tight w.r.t. the optimal duals, pick the lexicographically smallest.

    ``real`` marks genuine matchable cells; for every row those columns rank
    ahead of padding or forbidden columns.
    """
    n = a.shape[0]
    rank = np.arange(n)[None, :] + n * (~real)
    reduced = a - u[:, None] - v[None, :]
    scale = max(1.0, float(np.abs(a).max()))
    tight = np.abs(reduced) <= 1e-9 * scale
    if tight.sum() == n:
        return row_to_col
    row_to_col = row_to_col.copy()
    col_to_row = np.empty(n, dtype=int)
    col_to_row[row_to_col] = np.arange(n)
    fixed_rows = np.zeros(n, dtype=bool)
    fixed_cols = np.zeros(n, dtype=bool)
    for i in range(n):
        cols = np.flatnonzero(tight[i])
        for j in cols[np.argsort(rank[i, cols], kind="stable")]:
            j = int(j)
            if rank[i, j] >= rank[i, row_to_col[i]]:
                break
            if fixed_cols[j]:
                continue
            # Give column j to row i: the current owner of j must reach row i's old column.
            owner = int(col_to_row[j])
            old = int(row_to_col[i])
            fixed_rows[i] = True
            path = _alternating_path(tight, row_to_col, col_to_row, owner, old,
                                     fixed_rows, fixed_cols)
            fixed_rows[i] = False
            if path is None:
                continue
            for r, c in path:
                row_to_col[r] = c
                col_to_row[c] = r
            row_to_col[i] = j
            col_to_row[j] = i
            break
        # A row left on a padding/forbidden column cannot gain a real one later.
        if real[i, row_to_col[i]]:
            fixed_rows[i] = True
            fixed_cols[row_to_col[i]] = True
    return row_to_col


def solve_min_cost(costs) -> AssignmentResult:
    """Optimal assignment; ``inf`` entries are never matched."""
    m = _as_matrix(costs)
    n_rows, n_cols = m.shape
    if n_rows == 0 or n_cols == 0:
        return _result_from_pairs([], n_rows, n_cols)
    finite = np.isfinite(m)
    if not finite.any():
        return _result_from_pairs([], n_rows, n_cols)
    n = max(n_rows, n_cols)
    # Forbidden pairs cost more than any complete finite assignment, so the
    # optimum first maximizes the number of finite matches.
    big = 2.0 * (n * float(np.abs(m[finite]).max()) + 1.0)
    a = np.zeros((n, n))
    a[:n_rows, :n_cols] = np.where(finite, m, big)
    row_to_col, u, v = _hungarian_square(a)
    real = np.zeros((n, n), dtype=bool)
    real[:n_rows, :n_cols] = finite
    row_to_col = _lexicographic_optimum(a, row_to_col, u, v, real)
    pairs = [(r, int(c)) for r, c in enumerate(row_to_col)
             if r < n_rows and c < n_cols and finite[r, c]]
    return _result_from_pairs(pairs, n_rows, n_cols)


def solve_with_threshold(costs, kappa: float) -> AssignmentResult:
    """Optimal assignment restricted to pairs with cost <= ``kappa``."""
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    m = _as_matrix(costs)
    return solve_min_cost(np.where(m > kappa, np.inf, m))


def brute_force_oracle(costs) -> AssignmentResult:
    """Exhaustive enumeration of injective assignments (test oracle, size <= 8)."""
    m = _as_matrix(costs)
    n_rows, n_cols = m.shape
    if max(n_rows, n_cols) > MAX_ORACLE_SIZE:
        raise ValueError(f"oracle limited to {MAX_ORACLE_SIZE}x{MAX_ORACLE_SIZE}, got {m.shape}")
    if n_rows == 0 or n_cols == 0:
        return _result_from_pairs([], n_rows, n_cols)
    best_key = None
    best_pairs: list[tuple[int, int]] = []
    if n_rows <= n_cols:
        candidates = (list(enumerate(cols)) for cols in itertools.permutations(range(n_cols), n_rows))
    else:
        candidates = ([(r, c) for c, r in enumerate(rows)]
                      for rows in itertools.permutations(range(n_rows), n_cols))
    for cand in candidates:
        pairs = sorted((r, c) for r, c in cand if np.isfinite(m[r, c]))
        cost = sum(m[r, c] for r, c in pairs)
        key = (-len(pairs), cost, pairs)
        if best_key is None or key < best_key:
            best_key = key
            best_pairs = pairs
    return _result_from_pairs(best_pairs, n_rows, n_cols)
