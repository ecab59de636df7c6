"""Geometric ground-truth machinery: Chamfer affinity, Hungarian assignment,
and derivation of per-instance change labels between two tiles.

This is deliberately non-learned; it both labels synthetic data and serves as
the acceptance oracle for the learned change pipeline.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError
from .map_model import (ADDITION, DELETION, NO_CHANGE, STYLE_CHANGE,
                        ChangeRecord, VectorMapTile)

DEFAULT_MATCH_THRESHOLD = 1.0  # meters of Chamfer distance


def chamfer_distance(a, b) -> float:
    """Symmetric Chamfer distance between two 2-D point sets, in meters.

    Mean nearest-neighbor distance computed in both directions and averaged.
    """
    pa = np.asarray(a, dtype=np.float64)
    pb = np.asarray(b, dtype=np.float64)
    if pa.size == 0 or pb.size == 0:
        raise DomainError("chamfer_distance requires non-empty point sets")
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    d = np.sqrt(d2)
    return float(0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()))


def chamfer_matrix(instances_a, instances_b) -> np.ndarray:
    """Pairwise Chamfer distances, shape (len(a), len(b))."""
    out = np.zeros((len(instances_a), len(instances_b)), dtype=np.float64)
    for i, ia in enumerate(instances_a):
        for j, ib in enumerate(instances_b):
            out[i, j] = chamfer_distance(ia.points, ib.points)
    return out


# ---------------------------------------------------------------------------
# Hungarian assignment (shortest augmenting path, O(n^3))
# ---------------------------------------------------------------------------

def _solve_lap(cost: np.ndarray) -> np.ndarray:
    """Potentials-based Hungarian for an (n, m) matrix with n <= m.

    Returns col index assigned to each row. Classic augmenting-path scheme
    with numpy-vectorized inner relaxation.
    """
    n, m = cost.shape
    # Shifting by the minimum changes every complete row assignment equally.
    c = cost - cost.min()
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j] = 1-based row matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = c[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            if better.any():
                minv[1:][better] = cur[better]
                way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.zeros(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] > 0:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col


def hungarian_assign(cost) -> list[tuple[int, int]]:
    """Minimum-total-cost one-to-one assignment.

    Rectangular matrices are allowed; every index on the shorter side is
    matched and the residue on the longer side stays unmatched. Returns
    (row, col) pairs sorted by row.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise DomainError(f"cost matrix must be 2-D, got shape {c.shape}")
    if c.size == 0:
        return []
    if not np.all(np.isfinite(c)):
        raise DomainError("cost matrix entries must be finite")
    if c.shape[0] <= c.shape[1]:
        cols = _solve_lap(c)
        return [(i, int(j)) for i, j in enumerate(cols)]
    rows = _solve_lap(c.T)
    return sorted((int(i), j) for j, i in enumerate(rows))


def masked_assignment(cost, eligible) -> list[tuple[int, int]]:
    """Minimum-cost assignment restricted to eligible pairs.

    Ineligible entries are replaced by a sentinel larger than any possible
    eligible total, so the solver first maximizes the number of eligible
    matches and then minimizes their cost; sentinel-routed pairs are dropped.
    """
    c = np.asarray(cost, dtype=np.float64)
    mask = np.asarray(eligible, dtype=bool)
    if c.shape != mask.shape:
        raise DomainError("cost and eligibility shapes differ")
    if c.size == 0 or not mask.any():
        return []
    finite = np.abs(c[mask])
    sentinel = float(finite.sum() + finite.max() + 1.0)
    work = np.where(mask, c, sentinel)
    pairs = hungarian_assign(work)
    return [(i, j) for i, j in pairs if mask[i, j]]


# ---------------------------------------------------------------------------
# Change labeling
# ---------------------------------------------------------------------------

def label_changes(new_tile: VectorMapTile, historical_tile: VectorMapTile,
                  match_threshold: float = DEFAULT_MATCH_THRESHOLD) -> list[ChangeRecord]:
    """Derive change records between a new tile and the historical tile.

    Matching is purely geometric (Hungarian over Chamfer costs, pairs above
    ``match_threshold`` stay unmatched); styles only decide no_change versus
    style_change afterwards. Every instance of both tiles lands in exactly
    one record.
    """
    new_insts = new_tile.instances
    hist_insts = historical_tile.instances
    records: list[ChangeRecord] = []
    matched_new: dict[int, int] = {}
    matched_hist: set[int] = set()
    if new_insts and hist_insts:
        cost = chamfer_matrix(new_insts, hist_insts)
        for i, j in masked_assignment(cost, cost <= match_threshold):
            matched_new[i] = j
            matched_hist.add(j)
    for i, inst in enumerate(new_insts):
        j = matched_new.get(i)
        if j is None:
            records.append(ChangeRecord(ADDITION, predicted_id=inst.id))
        elif inst.style == hist_insts[j].style:
            records.append(ChangeRecord(NO_CHANGE, inst.id, hist_insts[j].id))
        else:
            records.append(ChangeRecord(STYLE_CHANGE, inst.id, hist_insts[j].id))
    for j, inst in enumerate(hist_insts):
        if j not in matched_hist:
            records.append(ChangeRecord(DELETION, historical_id=inst.id))
    return records
