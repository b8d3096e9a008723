"""MAP and constrained inference by alpha-expansion over min-cuts.

Every expansion move is solved exactly by a single min-cut, including
per-label usage costs and clique-OR costs (a cost incurred when any node of a
designated set takes a designated label).  Both directions are encoded with
one auxiliary node per (cost, move): acquiring the expansion label somewhere
in a set, and vacating it from a set.  Both gadgets are submodular, so no
truncation is ever needed and no infinite capacities enter the graph.

Inference calls are pure functions of (model, instance) and may run in
parallel across instances; a single call is single-threaded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import boxes as _boxes
from .core import Instance, Model, WeakAnnotation, edge_rewards, unary_scores
from .errors import InfeasibleAnnotationError, InvariantBreachError, ValidationError
from .maxflow import FlowNetwork

MOVE_TOL = 1e-9


@dataclass
class CliqueCost:
    """Cost incurred iff any node in `nodes` takes `label`."""

    nodes: np.ndarray
    label: int
    cost: float

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64)
        if self.cost < 0:
            raise ValidationError("clique cost must be >= 0")


@dataclass
class EnergyProblem:
    """A minimization instance: unary table, Potts attractions, label costs,
    clique-OR costs, plus optional per-node clamps and allowed-label sets.

    `offset` is bookkeeping for problems derived from a model: for every
    feasible labelling, energy(problem, y) + offset == -(score + loss)(y).
    """

    unary: np.ndarray  # (V, K), minimization convention
    edges: np.ndarray  # (E, 2) int
    weights: np.ndarray  # (E,) >= 0, cost when endpoint labels differ
    label_costs: Optional[np.ndarray] = None  # (K,) >= 0, paid iff label used
    clique_costs: list[CliqueCost] = field(default_factory=list)
    clamps: Optional[np.ndarray] = None  # (V,) int, 0 = free
    allowed: Optional[np.ndarray] = None  # (V, K) bool, None = all allowed
    offset: float = 0.0

    def __post_init__(self):
        self.unary = np.ascontiguousarray(self.unary, dtype=float)
        self.edges = np.ascontiguousarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=float).reshape(len(self.edges))
        if np.any(self.weights < 0):
            raise InvariantBreachError("pairwise terms must be attractive (>= 0)")
        if self.label_costs is None:
            self.label_costs = np.zeros(self.n_labels)
        self.label_costs = np.asarray(self.label_costs, dtype=float)
        if np.any(self.label_costs < 0):
            raise ValidationError("label costs must be >= 0")
        if self.clamps is not None:
            self.clamps = np.asarray(self.clamps, dtype=np.int64)
        if self.allowed is not None:
            self.allowed = np.asarray(self.allowed, dtype=bool)
            if self.clamps is not None:
                clamped = np.flatnonzero(self.clamps > 0)
                if not self.allowed[clamped, self.clamps[clamped] - 1].all():
                    raise ValidationError("clamped label outside allowed set")

    @property
    def n_nodes(self) -> int:
        return self.unary.shape[0]

    @property
    def n_labels(self) -> int:
        return self.unary.shape[1]

    def allowed_mask(self) -> np.ndarray:
        """(V, K) feasibility mask combining allowed sets and clamps."""
        mask = (
            np.ones((self.n_nodes, self.n_labels), dtype=bool)
            if self.allowed is None
            else self.allowed.copy()
        )
        if self.clamps is not None:
            clamped = np.flatnonzero(self.clamps > 0)
            mask[clamped] = False
            mask[clamped, self.clamps[clamped] - 1] = True
        return mask


def check_feasible(problem: EnergyProblem, labelling: np.ndarray) -> np.ndarray:
    y = np.asarray(labelling, dtype=np.int64).ravel()
    if len(y) != problem.n_nodes:
        raise ValidationError("labelling length mismatch")
    if len(y) and (y.min() < 1 or y.max() > problem.n_labels):
        raise ValidationError("label out of range")
    mask = problem.allowed_mask()
    if len(y) and not mask[np.arange(len(y)), y - 1].all():
        raise ValidationError("labelling violates clamps or allowed-label sets")
    return y


def energy(problem: EnergyProblem, labelling: np.ndarray) -> float:
    """Literal evaluation: unary + Potts + label costs + clique-OR costs."""
    y = check_feasible(problem, labelling)
    if len(y) == 0:
        return 0.0
    total = float(problem.unary[np.arange(len(y)), y - 1].sum())
    if len(problem.edges):
        differ = y[problem.edges[:, 0]] != y[problem.edges[:, 1]]
        total += float(problem.weights[differ].sum())
    for k in np.flatnonzero(problem.label_costs > 0):
        if (y == k + 1).any():
            total += float(problem.label_costs[k])
    for cq in problem.clique_costs:
        if (y[cq.nodes] == cq.label).any():
            total += cq.cost
    return total


def build_energy(model: Model, instance: Instance) -> EnergyProblem:
    """Negate the discriminant into Potts form with the same argmin.

    energy(y) + offset == -score(model, instance, y) for all labellings.
    """
    rewards = edge_rewards(model, instance)
    if np.any(rewards < 0):
        raise InvariantBreachError("negative pairwise reward; model invariant broken")
    return EnergyProblem(
        unary=-unary_scores(model, instance),
        edges=instance.edges,
        weights=rewards,
        offset=-float(rewards.sum()),
    )


def expand(problem: EnergyProblem, current: np.ndarray, alpha: int) -> np.ndarray:
    """Best single alpha-move: each node keeps its label or switches to alpha.

    Exact over the move space (one min-cut), label and clique costs included.
    The result never has higher energy than `current`.
    """
    y = check_feasible(problem, current)
    if not (1 <= alpha <= problem.n_labels):
        raise ValidationError(f"bad expansion label {alpha}")
    V = problem.n_nodes
    mask = problem.allowed_mask()
    fixed_switch = y == alpha
    free = mask[:, alpha - 1] & ~fixed_switch
    if not free.any():
        return y.copy()

    free_ids = np.flatnonzero(free)
    nf = len(free_ids)
    rank = np.full(V, -1, dtype=np.int64)
    rank[free_ids] = np.arange(nf)
    theta0 = problem.unary[free_ids, y[free_ids] - 1].copy()
    theta1 = problem.unary[free_ids, alpha - 1].copy()
    # graph node ids: 0 = source (keep side), 1 = sink (switch side),
    # 2..2+nf-1 = free nodes, then auxiliaries
    arc_t: list[np.ndarray] = []
    arc_h: list[np.ndarray] = []
    arc_c: list[np.ndarray] = []
    next_aux = 2 + nf

    def add_batch(tails, heads, caps):
        caps = np.asarray(caps, float)
        keep = caps > 0
        if keep.any():
            arc_t.append(np.asarray(tails, np.int64)[keep])
            arc_h.append(np.asarray(heads, np.int64)[keep])
            arc_c.append(caps[keep])

    def or_gadget(ids: np.ndarray, cost: float):
        """cost * [any of ids switches to alpha]"""
        nonlocal next_aux
        a = next_aux
        next_aux += 1
        gids = 2 + rank[ids]
        add_batch([0] + [a] * len(ids), np.concatenate([[a], gids]), [cost] * (len(ids) + 1))

    def vacate_gadget(ids: np.ndarray, cost: float):
        """cost * [any of ids keeps its current label]"""
        nonlocal next_aux
        a = next_aux
        next_aux += 1
        gids = 2 + rank[ids]
        add_batch(
            np.concatenate([gids, [a]]), [a] * len(ids) + [1], [cost] * (len(ids) + 1)
        )

    if len(problem.edges):
        ei = problem.edges[:, 0]
        ej = problem.edges[:, 1]
        r = problem.weights
        fi = free[ei]
        fj = free[ej]
        # both endpoints free: decompose the 2x2 table into unary shifts and
        # one directed arc of capacity 2r - E00
        both = fi & fj & (r > 0)
        if both.any():
            bi, bj, br = ei[both], ej[both], r[both]
            e00 = np.where(y[bi] != y[bj], br, 0.0)
            np.add.at(theta1, rank[bi], br - e00)
            np.add.at(theta1, rank[bj], -br)
            add_batch(2 + rank[bi], 2 + rank[bj], 2.0 * br - e00)
        # exactly one endpoint free: fold the fixed side into the unary
        one = (fi ^ fj) & (r > 0)
        if one.any():
            oi = np.where(fi[one], ei[one], ej[one])
            oj = np.where(fi[one], ej[one], ei[one])
            orr = r[one]
            lj = np.where(fixed_switch[oj], alpha, y[oj])
            np.add.at(theta0, rank[oi], np.where(y[oi] != lj, orr, 0.0))
            np.add.at(theta1, rank[oi], np.where(alpha != lj, orr, 0.0))

    if problem.label_costs[alpha - 1] > 0 and not fixed_switch.any():
        or_gadget(free_ids, float(problem.label_costs[alpha - 1]))
    for k in np.flatnonzero(problem.label_costs > 0) + 1:
        if k == alpha:
            continue
        members = np.flatnonzero(y == k)
        if len(members) == 0:
            continue
        if not free[members].all():
            continue  # some holder cannot move: cost stays, constant
        vacate_gadget(members, float(problem.label_costs[k - 1]))
    for cq in problem.clique_costs:
        if cq.cost == 0:
            continue
        if cq.label == alpha:
            if fixed_switch[cq.nodes].any():
                continue  # already paid, constant
            movable = cq.nodes[free[cq.nodes]]
            if len(movable):
                or_gadget(movable, cq.cost)
        else:
            members = cq.nodes[y[cq.nodes] == cq.label]
            if len(members) == 0 or not free[members].all():
                continue  # absent, or pinned: constant either way
            vacate_gadget(members, cq.cost)

    delta = theta1 - theta0
    pos = delta > 0
    neg = delta < 0
    add_batch(np.zeros(pos.sum(), np.int64), 2 + np.flatnonzero(pos), delta[pos])
    add_batch(2 + np.flatnonzero(neg), np.ones(neg.sum(), np.int64), -delta[neg])

    net = FlowNetwork(next_aux, 0, 1)
    if arc_t:
        net.add_arcs(
            np.concatenate(arc_t), np.concatenate(arc_h), np.concatenate(arc_c)
        )
    _, source_side = net.solve()

    result = y.copy()
    switch = ~source_side[2 + np.arange(nf)]
    result[free_ids[switch]] = alpha
    return result


def alpha_expansion(problem: EnergyProblem, init: np.ndarray) -> np.ndarray:
    """Cycle expansion moves over labels (ascending) until no move improves
    the energy by more than MOVE_TOL."""
    y = check_feasible(problem, init)
    mask = problem.allowed_mask()
    labels = [k for k in range(1, problem.n_labels + 1) if mask[:, k - 1].any()]
    best = energy(problem, y)
    improved = True
    while improved:
        improved = False
        for alpha in labels:
            cand = expand(problem, y, alpha)
            e = energy(problem, cand)
            if e < best - MOVE_TOL:
                y, best = cand, e
                improved = True
    return y


def argmin_unary_init(problem: EnergyProblem) -> np.ndarray:
    """Feasible initialization: per-node lowest allowed unary (lowest label
    on ties)."""
    u = problem.unary.copy()
    u[~problem.allowed_mask()] = np.inf
    y = np.argmin(u, axis=1) + 1
    if np.isinf(u[np.arange(problem.n_nodes), y - 1]).any():
        raise InfeasibleAnnotationError("a node has an empty allowed-label set")
    return y.astype(np.int64)


def map_inference(model: Model, instance: Instance) -> np.ndarray:
    """argmax_y score(model, instance, y), approximately (expansion-local)."""
    problem = build_energy(model, instance)
    return alpha_expansion(problem, argmin_unary_init(problem))


def latent_initialization(
    instance: Instance, annotation: WeakAnnotation
) -> np.ndarray:
    """Initial imputation: boxes filled with their labels (later boxes win),
    seed nodes seeded, everything else the lowest image-level label."""
    if annotation.image_level:
        fill = min(annotation.image_level)
    else:
        fill = min(annotation.all_labels)
    y = np.full(instance.n_nodes, fill, dtype=np.int64)
    for b in annotation.boxes:
        y[_boxes.insider_nodes(instance, b)] = b.label
    for s in annotation.seeds:
        y[instance.pixel_grid.node_map[s.row, s.col]] = s.label
    return y


@dataclass
class PinpointStats:
    """Per-box pinpointing effort: clamp iterations and insider counts."""

    iterations: dict[int, int]
    insider_counts: dict[int, int]


def annotation_consistent_inference(
    model: Model,
    instance: Instance,
    annotation: WeakAnnotation,
    init: Optional[np.ndarray] = None,
    return_stats: bool = False,
):
    """Best-scoring labelling consistent with a weak annotation.

    Image-level labels restrict the allowed set everywhere; seeds clamp their
    superpixels; box labels are suppressed outside their insider sets and the
    pinpointing loop then forces each box to touch all four shrunk sides.
    The result may still miss some image-level labels.
    """
    K = instance.label_space.K
    V = instance.n_nodes
    allowed = np.zeros((V, K), dtype=bool)
    for k in annotation.image_level | annotation.seed_labels:
        allowed[:, k - 1] = True
    insider_sets = _boxes.insider_sets_by_label(annotation, instance)
    for k, nodes in insider_sets.items():
        allowed[nodes, k - 1] = True
    clamps = np.zeros(V, dtype=np.int64)
    for s in annotation.seeds:
        node = int(instance.pixel_grid.node_map[s.row, s.col])
        if clamps[node] and clamps[node] != s.label:
            raise InfeasibleAnnotationError(
                f"seeds with different labels share superpixel {node}"
            )
        clamps[node] = s.label
    if not (allowed.any(axis=1) | (clamps > 0)).all():
        raise InfeasibleAnnotationError(
            "a node outside all boxes has no allowed label (empty image_level?)"
        )

    problem = build_energy(model, instance)
    problem.allowed = allowed
    problem.clamps = clamps
    mask = problem.allowed_mask()

    if init is None:
        init = latent_initialization(instance, annotation)
    y = np.asarray(init, dtype=np.int64).copy()
    bad = ~mask[np.arange(V), y - 1]
    if bad.any():
        raise InfeasibleAnnotationError("initial labelling violates the annotation")
    y = alpha_expansion(problem, y)

    stats = PinpointStats(iterations={}, insider_counts={})
    for bi, b in enumerate(annotation.boxes):
        stats.iterations[bi] = 0
        stats.insider_counts[bi] = len(_boxes.insider_nodes(instance, b))
    u_score = unary_scores(model, instance)
    total_insiders = sum(stats.insider_counts.values())
    for _ in range(total_insiders + 1):
        clamped_any = False
        all_tight = True
        for bi, b in enumerate(annotation.boxes):
            insiders = _boxes.insider_nodes(instance, b)
            while not _boxes.touches_all_sides(instance, b, y):
                all_tight = False
                cand = insiders[
                    (y[insiders] != b.label) & problem.allowed_mask()[insiders, b.label - 1]
                ]
                if len(cand) == 0:
                    raise InfeasibleAnnotationError(
                        f"box {bi} ({b}) cannot be made tight"
                    )
                rel = u_score[cand, b.label - 1] - u_score[cand, y[cand] - 1]
                pick = int(cand[int(np.argmax(rel))])
                problem.clamps[pick] = b.label
                problem.allowed[pick] = False
                problem.allowed[pick, b.label - 1] = True
                y[pick] = b.label
                y = expand(problem, y, b.label)
                stats.iterations[bi] += 1
                clamped_any = True
        if all_tight:
            break
        if not clamped_any:
            raise InfeasibleAnnotationError("pinpointing stalled without progress")
    else:
        raise InfeasibleAnnotationError("pinpointing failed to converge")

    return (y, stats) if return_stats else y
