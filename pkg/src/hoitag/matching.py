"""Minimum-cost bipartite matching between prediction slots and ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MatchAssignment:
    """Injective (prediction slot, ground-truth index) pairs, sorted by slot."""

    pairs: tuple[tuple[int, int], ...]
    n_slots: int
    total_cost: float = 0.0

    def gt_for_slot(self) -> dict[int, int]:
        return dict(self.pairs)

    @property
    def unmatched_slots(self) -> list[int]:
        matched = {i for i, _ in self.pairs}
        return [i for i in range(self.n_slots) if i not in matched]


def _solve_rows_le_cols(cost: np.ndarray) -> tuple[float, list[int]]:
    """Shortest-augmenting-path Hungarian method for n <= m. Returns (total, col of each row)."""
    n, m = cost.shape
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: row matched to column j (1-based), 0 = free
    way = [0] * (m + 1)
    c = cost.tolist()
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = -1
            row = c[i0 - 1]
            ui0 = u[i0]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
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
    cols = [-1] * n
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    total = sum(c[i][cols[i]] for i in range(n))
    return total, cols


def min_cost(cost: np.ndarray) -> float:
    """Minimum total cost of a matching of size min(rows, cols)."""
    if cost.size == 0:
        return 0.0
    if cost.shape[0] > cost.shape[1]:
        cost = cost.T
    return _solve_rows_le_cols(cost)[0]


def hungarian_match(cost) -> MatchAssignment:
    """Optimal injective assignment of rows (slots) to columns (ground truth).

    Among all optimal assignments the lexicographically smallest one, read
    row by row with "unmatched" ordered after every column, is returned, so
    ties resolve the same way on every platform.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    n_rows, n_cols = cost.shape
    if n_cols == 0 or n_rows == 0:
        return MatchAssignment((), n_rows, 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")

    best = min_cost(cost)
    tol = 1e-9 * max(1.0, abs(best))
    need = min(n_rows, n_cols)
    free_cols = list(range(n_cols))
    pairs: list[tuple[int, int]] = []
    fixed = 0.0
    for i in range(n_rows):
        rest_rows = list(range(i + 1, n_rows))
        options = [(g, cost[i, g]) for g in free_cols] + [(None, 0.0)]
        for g, c in options:
            cols_left = [j for j in free_cols if j != g]
            still_needed = need - len(pairs) - (g is not None)
            if still_needed > min(len(rest_rows), len(cols_left)) or still_needed < 0:
                continue
            if still_needed != min(len(rest_rows), len(cols_left)):
                continue
            sub = cost[np.ix_(rest_rows, cols_left)] if rest_rows and cols_left else np.zeros((0, 0))
            if fixed + c + min_cost(sub) <= best + tol:
                if g is not None:
                    pairs.append((i, g))
                    free_cols.remove(g)
                    fixed += c
                break
        else:  # pragma: no cover - an optimal completion always exists
            raise RuntimeError("matching refinement failed")
    return MatchAssignment(tuple(pairs), n_rows, float(sum(cost[i, g] for i, g in pairs)))
