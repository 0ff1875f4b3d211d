"""Bipartite matching between padded gold entity sets and query predictions.

The pair cost sums the prediction's raw probabilities at the target's
category and boundaries (zero for null targets); the training loss sums
negative log-probabilities along the optimal assignment, with the class
term covering all queries and boundary terms only the real targets. No
gradient flows through the assignment itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import Entity

LOG_EPS = 1e-12


class MatchingError(ValueError):
    """A matching contract was violated (bad shapes, out-of-range targets)."""


@dataclass
class PaddedGold:
    """Gold entities padded with None (the null target) to the query count."""

    targets: list[Optional[Entity]]
    gold_count: int

    def __len__(self) -> int:
        return len(self.targets)


def pad_gold(gold, n: int, canonical: bool = True) -> PaddedGold:
    """Pad a gold entity collection to n slots.

    With canonical=True the entities are sorted by (left, right, category)
    first, which makes downstream losses independent of input order.
    """
    entities = sorted(gold) if canonical else list(gold)
    if len(entities) > n:
        raise MatchingError(
            f"{len(entities)} gold entities exceed the query count {n}"
        )
    return PaddedGold(entities + [None] * (n - len(entities)), len(entities))


def match_cost(target: Optional[Entity], pred, j: int) -> float:
    """Pair cost between one padded target and prediction slot j."""
    if target is None:
        return 0.0
    length = pred.length
    if target.right >= length:
        raise MatchingError(
            f"target boundary {target.right} outside sentence of length {length}"
        )
    return -float(
        pred.p_class.data[j, target.category]
        + pred.p_left.data[j, target.left]
        + pred.p_right.data[j, target.right]
    )


def cost_matrix(padded: PaddedGold, pred, mode: str = "prob") -> np.ndarray:
    """Full pairwise cost matrix; row i is identically zero for null targets.

    mode="prob" sums raw probabilities (the default); mode="logprob" is an
    experimental scale-matched variant summing log-probabilities.
    """
    n = len(padded)
    pc = pred.p_class.data
    pl = pred.p_left.data
    pr = pred.p_right.data
    if pc.shape[0] != n:
        raise MatchingError(
            f"prediction count {pc.shape[0]} does not match padded size {n}"
        )
    if mode == "logprob":
        pc = np.log(pc + LOG_EPS)
        pl = np.log(pl + LOG_EPS)
        pr = np.log(pr + LOG_EPS)
    elif mode != "prob":
        raise MatchingError(f"unknown cost mode {mode!r}")
    cost = np.zeros((n, n), dtype=np.float64)
    for i, target in enumerate(padded.targets):
        if target is None:
            continue
        if target.right >= pred.length:
            raise MatchingError(
                f"target boundary {target.right} outside sentence of length "
                f"{pred.length}"
            )
        cost[i, :] = -(pc[:, target.category] + pl[:, target.left] + pr[:, target.right])
    return cost


@dataclass
class Assignment:
    """A permutation mapping gold index i to prediction index perm[i]."""

    perm: np.ndarray
    total_cost: float


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost perfect matching on a square cost matrix.

    Deterministic: rows are processed in ascending order and ties resolve
    to the lowest column index, so identically-zero rows (null targets,
    padded last) map by ascending index to the remaining columns.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise MatchingError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix contains non-finite entries")
    n = cost.shape[0]
    zero_rows = np.flatnonzero(np.all(cost == 0.0, axis=1))
    active_rows = np.flatnonzero(np.any(cost != 0.0, axis=1))
    perm = np.full(n, -1, dtype=np.intp)
    if active_rows.size:
        partial = _solve_rows(cost, active_rows)
        perm[active_rows] = partial
    taken = set(perm[perm >= 0].tolist())
    leftover = [j for j in range(n) if j not in taken]
    perm[zero_rows] = leftover
    total = float(cost[np.arange(n), perm].sum())
    return Assignment(perm, total)


def _solve_rows(cost: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path assignment of the given rows to columns."""
    n = cost.shape[1]
    m = rows.size
    inf = np.inf
    u = np.zeros(m + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.intp)  # column j+1 -> phase row index + 1
    for phase in range(1, m + 1):
        match[0] = phase
        j0 = 0
        minv = np.full(n + 1, inf)
        way = np.zeros(n + 1, dtype=np.intp)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            cur = np.empty(n + 1)
            cur[0] = inf
            cur[1:] = cost[rows[i0 - 1]] - u[i0] - v[1:]
            free = ~used
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            candidates = np.where(free, minv, inf)
            j1 = int(np.argmin(candidates))
            delta = candidates[j1]
            u[match[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j_prev = way[j0]
            match[j0] = match[j_prev]
            j0 = j_prev
    out = np.full(m, -1, dtype=np.intp)
    for j in range(1, n + 1):
        if match[j] > 0:
            out[match[j] - 1] = j - 1
    return out


def set_loss(
    padded: PaddedGold,
    pred,
    assignment: Assignment,
    null_id: int,
    eps: float = LOG_EPS,
) -> ad.Tensor:
    """Negative log-likelihood along a fixed assignment.

    The class term covers every query (null targets score the null label);
    boundary terms apply only to real targets. Probabilities are clamped
    by log(p + eps) so an early-training zero cannot produce -inf.
    """
    n = len(padded)
    perm = assignment.perm
    if perm.shape != (n,):
        raise MatchingError("assignment does not match padded gold size")
    class_cols = np.array(
        [t.category if t is not None else null_id for t in padded.targets],
        dtype=np.intp,
    )
    class_probs = ad.gather_items(pred.p_class, perm, class_cols)
    total = ad.neg(ad.sum_all(ad.log(ad.addc(class_probs, eps))))
    real = [i for i, t in enumerate(padded.targets) if t is not None]
    if real:
        rows = perm[real]
        lefts = np.array([padded.targets[i].left for i in real], dtype=np.intp)
        rights = np.array([padded.targets[i].right for i in real], dtype=np.intp)
        left_probs = ad.gather_items(pred.p_left, rows, lefts)
        right_probs = ad.gather_items(pred.p_right, rows, rights)
        total = ad.add(total, ad.neg(ad.sum_all(ad.log(ad.addc(left_probs, eps)))))
        total = ad.add(total, ad.neg(ad.sum_all(ad.log(ad.addc(right_probs, eps)))))
    return total


def bipartite_loss(
    gold,
    pred,
    null_id: int,
    cost_mode: str = "prob",
    eps: float = LOG_EPS,
) -> tuple[ad.Tensor, Assignment]:
    """Pad, match with the Hungarian algorithm, and score one sentence."""
    n = pred.p_class.data.shape[0]
    padded = pad_gold(gold, n, canonical=True)
    assignment = hungarian(cost_matrix(padded, pred, mode=cost_mode))
    return set_loss(padded, pred, assignment, null_id, eps=eps), assignment


def ce_loss_baseline(
    gold_ordered: Sequence[Entity],
    pred,
    null_id: int,
    eps: float = LOG_EPS,
) -> ad.Tensor:
    """Order-sensitive ablation: the set loss with the identity assignment."""
    n = pred.p_class.data.shape[0]
    padded = pad_gold(gold_ordered, n, canonical=False)
    identity = Assignment(np.arange(n, dtype=np.intp), 0.0)
    return set_loss(padded, pred, identity, null_id, eps=eps)
