"""Brute-force references for small instances.

These deliberately re-evaluate definitions literally (their own energy sum,
the loss formulas, plain enumeration) and share no evaluation code with the
inference module, so transcription errors in the optimized paths cannot hide.
Results are deterministic: ties break toward the lexicographically smallest
labelling.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .core import (
    FullLabelling,
    Instance,
    Model,
    WeakAnnotation,
    consistent_set_membership,
    score,
)
from .errors import BudgetExceededError
from .inference import EnergyProblem


@dataclass(frozen=True)
class EnumerationBudget:
    max_labellings: int = 10**6

    def __post_init__(self):
        if self.max_labellings <= 0:
            raise ValueError("budget must be positive")


DEFAULT_BUDGET = EnumerationBudget()


def _candidates(problem: EnergyProblem) -> list[np.ndarray]:
    mask = problem.allowed_mask()
    return [np.flatnonzero(mask[i]) + 1 for i in range(problem.n_nodes)]


def _all_labellings(cands: list[np.ndarray], budget: EnumerationBudget) -> np.ndarray:
    total = 1
    for c in cands:
        total *= len(c)
        if total > budget.max_labellings:
            raise BudgetExceededError(
                f"{total}+ labellings exceed budget {budget.max_labellings}"
            )
    grids = np.meshgrid(*cands, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def brute_force_min_energy(
    problem: EnergyProblem, budget: EnumerationBudget = DEFAULT_BUDGET
) -> tuple[np.ndarray, float]:
    """Exact global minimizer by enumeration over clamp/allowed-reduced space."""
    Y = _all_labellings(_candidates(problem), budget)
    vals = np.zeros(len(Y))
    idx = np.arange(problem.n_nodes)
    vals += problem.unary[idx[None, :], Y - 1].sum(axis=1)
    for (i, j), r in zip(problem.edges, problem.weights):
        vals += r * (Y[:, i] != Y[:, j])
    for k in np.flatnonzero(problem.label_costs > 0):
        vals += problem.label_costs[k] * (Y == k + 1).any(axis=1)
    for cq in problem.clique_costs:
        vals += cq.cost * (Y[:, cq.nodes] == cq.label).any(axis=1)
    best = int(np.argmin(vals))
    return Y[best].copy(), float(vals[best])


def brute_force_max_score_plus_loss(
    model: Model,
    instance: Instance,
    annotation,
    config=None,
    budget: EnumerationBudget = DEFAULT_BUDGET,
) -> tuple[np.ndarray, float]:
    """Exact maximizer of score + annotation loss via the literal loss ops."""
    from . import losses

    K = instance.label_space.K
    cands = [np.arange(1, K + 1)] * instance.n_nodes
    Y = _all_labellings(cands, budget)
    best_y, best_v = None, -np.inf
    for row in Y:
        v = score(model, instance, row) + losses.annotation_loss(
            row, instance, annotation, config
        )
        if v > best_v:
            best_y, best_v = row.copy(), float(v)
    return best_y, best_v


def enumerate_consistent(
    annotation: WeakAnnotation,
    instance: Instance,
    budget: EnumerationBudget = DEFAULT_BUDGET,
) -> list[np.ndarray]:
    """All full labellings consistent with a weak annotation."""
    K = instance.label_space.K
    if K**instance.n_nodes > budget.max_labellings:
        raise BudgetExceededError(
            f"{K}^{instance.n_nodes} labellings exceed budget {budget.max_labellings}"
        )
    out = []
    for tup in product(range(1, K + 1), repeat=instance.n_nodes):
        y = np.array(tup, dtype=np.int64)
        if consistent_set_membership(annotation, instance, y):
            out.append(y)
    return out
