"""Minibatch optimal-transport pairing of reference and data functions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class CouplingPlan:
    perm: np.ndarray
    cost: float

    def __post_init__(self):
        p = np.asarray(self.perm)
        if p.ndim != 1 or not np.array_equal(np.sort(p), np.arange(len(p))):
            raise ValueError("coupling is not a permutation")


def sq_cost_matrix(batch0: np.ndarray, batch1: np.ndarray) -> np.ndarray:
    """Mean-over-grid squared distance between every pair of functions.

    Inputs are (b, ...) arrays on a shared grid.
    """
    a = np.asarray(batch0, dtype=float)
    b = np.asarray(batch1, dtype=float)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"grid mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    if len(a) != len(b):
        raise ValueError(f"batch sizes differ: {len(a)} vs {len(b)}")
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    out = np.empty((len(a), len(b)))
    step = max(1, 2 ** 22 // max(1, a.shape[1] * len(b)))
    for i in range(0, len(a), step):
        d = a[i:i + step, None, :] - b[None, :, :]
        out[i:i + step] = np.mean(d * d, axis=-1)
    return out


def min_cost_assignment(cost: np.ndarray) -> CouplingPlan:
    """Exact minimum-cost perfect matching; row i is paired with column perm[i]."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(cost), dtype=int)
    perm[rows] = cols
    return CouplingPlan(perm, float(cost[np.arange(len(cost)), perm].sum()))


def couple_minibatch(batch0: np.ndarray, batch1: np.ndarray, check: bool = False):
    """Reorder ``batch1`` so that (batch0[i], out[i]) realizes the OT plan.

    Returns ``(h0, h1, plan)``.  With ``check`` the plan cost is asserted not
    to exceed the identity pairing.
    """
    cost = sq_cost_matrix(batch0, batch1)
    plan = min_cost_assignment(cost)
    if check:
        identity = float(np.trace(cost))
        assert plan.cost <= identity + 1e-9 * max(1.0, identity), (plan.cost, identity)
    return np.asarray(batch0), np.asarray(batch1)[plan.perm], plan
