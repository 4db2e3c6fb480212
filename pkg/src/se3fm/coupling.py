"""Minibatch optimal-transport coupling between noise and data chains.

The cost between two chains sums per-residue squared geodesic rotation
distance (rad^2) and squared Euclidean translation distance (A^2), weighted
1:1 by default. Assignments are solved exactly with the shortest
augmenting-path Hungarian method; ties between equal-cost optima are broken
toward the lexicographically smallest permutation, which the dual potentials
make cheap to resolve.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import FrameChain, rotation_distance


def pairwise_cost(data_batch, noise_batch, rot_weight=1.0, trans_weight=1.0):
    """Cost matrix C[i, j] between data chain i and noise chain j."""
    if len(data_batch) != len(noise_batch):
        raise DataError("coupling needs equal batch sizes")
    lengths = {len(c) for c in data_batch} | {len(c) for c in noise_batch}
    if len(lengths) != 1:
        raise DataError(f"coupling needs equal chain lengths, got {sorted(lengths)}")
    rot_a = np.stack([c.rot for c in data_batch])      # (B, N, 3, 3)
    rot_b = np.stack([c.rot for c in noise_batch])
    tr_a = np.stack([c.trans for c in data_batch])     # (B, N, 3)
    tr_b = np.stack([c.trans for c in noise_batch])
    # trace(r_a^T r_b) per (i, j, residue), then the angle
    tr = np.einsum("inab,jnab->ijn", rot_a, rot_b)
    ang = np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))
    d_trans = tr_a[:, None] - tr_b[None, :]
    cost = rot_weight * np.sum(ang**2, axis=-1) + trans_weight * np.sum(d_trans**2, axis=(-2, -1))
    if not np.all(np.isfinite(cost)):
        raise DataError("non-finite entries in coupling cost")
    return cost


@dataclass
class Assignment:
    """Row-to-column permutation and its total cost."""

    permutation: np.ndarray
    cost: float


def _shortest_path_assignment(cost):
    """Hungarian method via shortest augmenting paths, O(n^3).

    Returns (col_of_row, u, v) where u, v are dual potentials satisfying
    u[i] + v[j] <= cost[i, j] with equality on matched edges.
    """
    n = cost.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j] = row matched to column j (1-based, 0 free)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            better = (~used[1:]) & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(used[1:], INF, minv[1:])
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][~used[1:]] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _lexicographic_refine(cost, col_of_row, u, v):
    """Lexicographically smallest permutation among minimum-cost ones.

    Every optimal assignment uses only tight edges (zero reduced cost), and
    any perfect matching of tight edges is optimal; greedily fix each row to
    its smallest tight column that still leaves the rest matchable.
    """
    n = cost.shape[0]
    scale = max(1.0, float(np.abs(cost).max()))
    tight = cost - u[:, None] - v[None, :] <= 1e-9 * scale

    def matchable(row, free_cols, chosen_prefix):
        # Kuhn's augmenting-path feasibility for rows row..n-1 on free_cols
        match_col = {}
        for r in range(row, n):
            seen = set()

            def try_row(r_):
                for c in sorted(free_cols - seen):
                    if tight[r_, c]:
                        seen.add(c)
                        if c not in match_col or try_row(match_col[c]):
                            match_col[c] = r_
                            return True
                return False

            if not try_row(r):
                return False
        return True

    result = np.empty(n, dtype=int)
    free = set(range(n))
    for i in range(n):
        current = col_of_row[i]
        candidates = sorted(c for c in free if tight[i, c] and c <= current)
        chosen = None
        for c in candidates:
            if c == current:
                chosen = c
                break
            free.discard(c)
            if matchable(i + 1, free, result[:i]):
                chosen = c
                # re-route the remaining rows onto a fresh optimal matching
                sub_rows = list(range(i + 1, n))
                sub_cols = sorted(free)
                if sub_rows:
                    sub = cost[np.ix_(sub_rows, sub_cols)]
                    sub_assign, su, sv = _shortest_path_assignment(sub)
                    for r_off, c_off in enumerate(sub_assign):
                        col_of_row[sub_rows[r_off]] = sub_cols[c_off]
                break
            free.add(c)
        if chosen is None:
            chosen = current
        result[i] = chosen
        free.discard(chosen)
    return result


def solve_assignment(c) -> Assignment:
    """Minimum-cost perfect matching with deterministic lexicographic ties."""
    c = np.asarray(c, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DataError(f"cost matrix must be square, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise DataError("non-finite entries in cost matrix")
    if c.shape[0] == 0:
        return Assignment(np.empty(0, dtype=int), 0.0)
    col_of_row, u, v = _shortest_path_assignment(c)
    perm = _lexicographic_refine(c, col_of_row.copy(), u, v)
    total = float(c[np.arange(c.shape[0]), perm].sum())
    return Assignment(perm, total)


def couple(data_batch, noise_batch):
    """Pair data with noise chains along the optimal assignment.

    Returns a list of (data_chain, noise_chain) tuples in data order.
    """
    cost = pairwise_cost(data_batch, noise_batch)
    assign = solve_assignment(cost)
    return [(data_batch[i], noise_batch[assign.permutation[i]]) for i in range(len(data_batch))]


def chain_cost(a: FrameChain, b: FrameChain, rot_weight=1.0, trans_weight=1.0):
    """Squared product-metric cost between two same-length chains."""
    ang = rotation_distance(a.rot, b.rot)
    return float(rot_weight * np.sum(ang**2) + trans_weight * np.sum((a.trans - b.trans) ** 2))
