"""Slot-to-ground-truth assignment.

Costs are computed on detached predictions; the assignment is a constant
of the forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, softmax

from .boxes import pairwise_l1_giou


class MatchingError(ValueError):
    pass


@dataclass
class PairTarget:
    """One annotated human-object pair; several HOI classes may share it."""

    human_box: np.ndarray
    object_box: np.ndarray
    obj: int
    classes: list[int]


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (slot, ground truth), ordered by ground truth
    slot_cost: list[float]
    total: float

    @property
    def slots(self) -> list[int]:
        return [s for s, _ in self.pairs]

    def cost_of_slot(self) -> dict[int, float]:
        return {s: c for (s, _), c in zip(self.pairs, self.slot_cost)}


@dataclass
class CostWeights:
    box: float = 2.5
    giou: float = 1.0
    obj: float = 1.0
    hoi: float = 1.0


def pair_cost(hoi_logits, obj_logits, human_box, object_box, targets: list[PairTarget],
              columns: dict[int, int], w: CostWeights = CostWeights()) -> np.ndarray:
    """N_q x G matching cost.

    ``columns`` maps an HOI class id to its logit column. The class term is
    the mean sigmoid over the pair's classes (one class: just its sigmoid).
    """
    hoi_logits = np.asarray(hoi_logits, dtype=np.float64)
    gt_h = np.array([t.human_box for t in targets], dtype=np.float64)
    gt_o = np.array([t.object_box for t in targets], dtype=np.float64)
    l1_h, g_h = pairwise_l1_giou(np.asarray(human_box, dtype=np.float64), gt_h)
    l1_o, g_o = pairwise_l1_giou(np.asarray(object_box, dtype=np.float64), gt_o)
    obj_p = softmax(np.asarray(obj_logits, dtype=np.float64), axis=1)
    hoi_p = expit(hoi_logits)
    c_obj = -obj_p[:, [t.obj for t in targets]]
    c_hoi = -np.stack([hoi_p[:, [columns[c] for c in t.classes]].mean(axis=1) for t in targets], axis=1)
    return (w.box * (l1_h + l1_o) + w.giou * ((1 - g_h) + (1 - g_o))
            + w.obj * c_obj + w.hoi * c_hoi)


def _lsa(cost: np.ndarray) -> tuple[list[int], float]:
    """Min-cost assignment of every row to a distinct column (rows <= cols).

    Shortest augmenting path with row/column potentials, O(n^2 m).
    """
    n, m = cost.shape
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: row matched to column j (1-based, 0 = free)
    way = [0] * (m + 1)
    c = cost.tolist()
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
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
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            assign[p[j] - 1] = j - 1
    return assign, math.fsum(c[i][assign[i]] for i in range(n))


def hungarian(cost, tol: float = 1e-10) -> MatchResult:
    """Minimum-cost injective map from ground truths (columns) to slots (rows).

    Among optimal assignments the slot sequence, read in ground-truth order,
    is lexicographically smallest; optimality is judged within
    ``tol * (1 + |optimum|)``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost must be 2-D, got shape {cost.shape}")
    nq, g = cost.shape
    if g > nq:
        raise MatchingError(f"{g} ground truths exceed {nq} slots")
    if not np.isfinite(cost).all():
        raise MatchingError("cost matrix has non-finite entries")
    if g == 0:
        return MatchResult([], [], 0.0)
    ct = cost.T  # G x N_q
    _, best = _lsa(ct)
    slack = tol * (1.0 + abs(best))
    chosen: list[int] = []
    fixed = 0.0
    for gi in range(g):
        free = [s for s in range(nq) if s not in chosen]
        for s in free:
            head = fixed + ct[gi, s]
            if gi + 1 < g:
                rest_cols = [c for c in free if c != s]
                _, tail = _lsa(ct[gi + 1:][:, rest_cols])
            else:
                tail = 0.0
            if head + tail <= best + slack:
                chosen.append(s)
                fixed = head
                break
        else:  # pragma: no cover - only reachable through float pathologies
            raise MatchingError("failed to reconstruct an optimal assignment")
    pairs = [(s, gi) for gi, s in enumerate(chosen)]
    eta = [float(cost[s, gi]) for s, gi in pairs]
    return MatchResult(pairs, eta, math.fsum(eta))

