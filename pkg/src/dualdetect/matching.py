"""Cost-matrix construction and optimal bipartite assignment.

Two strategies are exposed on top of a single exact solver:

- one_to_one_match: classic set-prediction matching, at most one prediction
  per target.
- one_to_many_match: each target is replicated `replication` times before
  solving, so up to `replication` predictions can land on one target.

The solver is an augmenting-path Hungarian method with row/column potentials
(O(rows^2 * cols) with rows <= cols). Rectangular inputs are solved directly
on the smaller side; conceptually this equals padding to a square with a
sentinel cost larger than any real entry sum, with padded matches reported
as unmatched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .geometry import GroundTruthBox, Prediction


@dataclass(frozen=True)
class MatchWeights:
    """Weights of the classification and box terms in the matching cost."""

    alpha1: float = 2.0
    alpha2: float = 5.0

    def __post_init__(self) -> None:
        if self.alpha1 <= 0.0 or self.alpha2 <= 0.0:
            raise ValueError(
                f"match weights must be strictly positive, got "
                f"alpha1={self.alpha1}, alpha2={self.alpha2}"
            )


@dataclass(frozen=True)
class CostMatrix:
    """Per-(prediction, target) matching cost. Rows are predictions."""

    entries: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.entries.shape[0]

    @property
    def n_cols(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class Assignment:
    """Result of bipartite matching.

    `pairs` holds (prediction index, target index) sorted by prediction
    index; `unmatched_predictions` lists every prediction not in a pair.
    For one-to-many matches the target index is the original
    (pre-replication) one, so it can repeat up to the replication factor.
    """

    pairs: Tuple[Tuple[int, int], ...]
    unmatched_predictions: Tuple[int, ...]
    total_cost: float


def build_cost_matrix(
    preds: Sequence[Prediction],
    targets: Sequence[GroundTruthBox],
    weights: MatchWeights = MatchWeights(),
) -> CostMatrix:
    """cost(i, j) = alpha1 * (1 - score_i) + alpha2 * l1(box_i, box_j)."""
    if len(preds) == 0 or len(targets) == 0:
        raise ValueError("build_cost_matrix requires non-empty predictions and targets")
    scores = np.array([p.score for p in preds], dtype=np.float64)
    if np.any(scores < 0.0) or np.any(scores > 1.0):
        raise ValueError("prediction scores must lie in [0, 1]")
    pred_boxes = np.array(
        [[p.box.cx, p.box.cy, p.box.w, p.box.h] for p in preds], dtype=np.float64
    )
    target_boxes = np.array(
        [[t.box.cx, t.box.cy, t.box.w, t.box.h] for t in targets], dtype=np.float64
    )
    l1 = np.abs(pred_boxes[:, None, :] - target_boxes[None, :, :]).sum(axis=2)
    entries = weights.alpha1 * (1.0 - scores)[:, None] + weights.alpha2 * l1
    return CostMatrix(entries=entries)


def _solve_lap(cost: np.ndarray) -> List[Tuple[int, int]]:
    """Minimum-cost matching covering every row of `cost` (rows <= cols).

    Augmenting-path Hungarian with potentials. Column index `m` acts as the
    virtual start column of each augmentation; ties resolve to the lowest
    column index, which keeps results reproducible run to run.
    """
    n, m = cost.shape
    u = np.zeros(n + 1, dtype=np.float64)
    v = np.zeros(m + 1, dtype=np.float64)
    # row matched to each column; n = "no row"
    row_for_col = np.full(m + 1, n, dtype=np.int64)
    way = np.zeros(m, dtype=np.int64)

    for i in range(n):
        row_for_col[m] = i
        j0 = m
        min_reduced = np.full(m, np.inf, dtype=np.float64)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_for_col[j0]
            cur = cost[i0, :] - u[i0] - v[:m]
            free = ~used[:m]
            improved = free & (cur < min_reduced)
            min_reduced[improved] = cur[improved]
            way[improved] = j0
            candidates = np.where(free, min_reduced, np.inf)
            j1 = int(np.argmin(candidates))
            delta = candidates[j1]
            u[row_for_col[used]] += delta
            v[used] -= delta
            min_reduced[free] -= delta
            j0 = j1
            if row_for_col[j0] == n:
                break
        # augment along the alternating path back to the virtual column
        while j0 != m:
            j_prev = int(way[j0])
            row_for_col[j0] = row_for_col[j_prev]
            j0 = j_prev

    return [(int(row_for_col[j]), j) for j in range(m) if row_for_col[j] != n]


def hungarian(cost_matrix: CostMatrix) -> Assignment:
    """Exact minimum-cost assignment over injective row -> column mappings.

    Rectangular matrices leave |rows - cols| rows (or columns) unmatched.
    The total cost is the sum of the matched original entries, accumulated
    in ascending row order.
    """
    entries = np.asarray(cost_matrix.entries, dtype=np.float64)
    if entries.ndim != 2 or entries.size == 0:
        raise ValueError("cost matrix must be a non-empty 2-D array")
    if not np.all(np.isfinite(entries)):
        raise ValueError("cost matrix contains non-finite entries")

    n_rows, n_cols = entries.shape
    if n_rows <= n_cols:
        pairs = _solve_lap(entries)
    else:
        pairs = [(r, c) for c, r in _solve_lap(entries.T)]

    pairs.sort(key=lambda rc: rc[0])
    matched_rows = {r for r, _ in pairs}
    unmatched = tuple(r for r in range(n_rows) if r not in matched_rows)
    total = 0.0
    for r, c in pairs:
        total += float(entries[r, c])
    return Assignment(pairs=tuple(pairs), unmatched_predictions=unmatched, total_cost=total)


def one_to_one_match(
    preds: Sequence[Prediction],
    targets: Sequence[GroundTruthBox],
    weights: MatchWeights = MatchWeights(),
) -> Assignment:
    """Hungarian assignment on the prediction/target cost matrix; at most one
    prediction per target."""
    return hungarian(build_cost_matrix(preds, targets, weights))


def replicate_targets(
    targets: Sequence[GroundTruthBox], replication: int
) -> List[GroundTruthBox]:
    """Copy each target `replication` times, grouped by source target.

    Every replica records the index of the target it was copied from.
    """
    if replication < 1:
        raise ValueError(f"replication factor must be >= 1, got {replication}")
    out: List[GroundTruthBox] = []
    for idx, t in enumerate(targets):
        for _ in range(replication):
            out.append(GroundTruthBox(box=t.box, source_index=idx))
    return out


def one_to_many_match(
    preds: Sequence[Prediction],
    targets: Sequence[GroundTruthBox],
    replication: int,
    weights: MatchWeights = MatchWeights(),
) -> Assignment:
    """Hungarian assignment against the replicated target list.

    Each original target receives between 0 and `replication` predictions.
    Pairs report the original target index. With replication 1 the result
    is identical to one_to_one_match.
    """
    replicas = replicate_targets(targets, replication)
    solved = hungarian(build_cost_matrix(preds, replicas, weights))
    pairs = tuple(
        (pred_idx, int(replicas[col].source_index))  # type: ignore[arg-type]
        for pred_idx, col in solved.pairs
    )
    return Assignment(
        pairs=pairs,
        unmatched_predictions=solved.unmatched_predictions,
        total_cost=solved.total_cost,
    )
