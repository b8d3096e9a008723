"""Annotation-specific loss functions and loss-augmented energy assembly.

Each weak loss estimates the expected number of mislabelled pixels over the
full labellings consistent with the annotation, so losses for different
annotation types share one scale and a single weak/strong balance suffices.

Sign bookkeeping: maximizing score + loss is recast as minimizing an
EnergyProblem; the dropped constants accumulate in `problem.offset` so that
energy(problem, y) + offset == -(score + loss)(y) holds exactly for every
labelling.  Tests lean on that identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import boxes as _boxes
from .core import FullLabelling, Instance, Model, UNLABELLED, WeakAnnotation
from .errors import ValidationError
from .inference import CliqueCost, EnergyProblem, build_energy

BETA_DEFAULT = 1.0


@dataclass(frozen=True)
class LossConfig:
    """beta balances box/seed terms against image-level terms (paper-style
    default 1); area_estimates optionally replaces the uniform per-label area
    guess with empirical values."""

    beta: float = BETA_DEFAULT
    area_estimates: Optional[dict[int, float]] = None
    nu_omega_profile: str = "uniform"

    def __post_init__(self):
        if self.beta < 0:
            raise ValidationError("beta must be >= 0")
        if self.nu_omega_profile != "uniform":
            raise ValidationError("only the uniform nu/omega profile is supported")
        if self.area_estimates is not None:
            if any(v <= 0 for v in self.area_estimates.values()):
                raise ValidationError("area estimates must be > 0")


DEFAULT_LOSS_CONFIG = LossConfig()


@dataclass(frozen=True)
class LabelPartition:
    """Labels split by annotation role; nodes split into box insiders and rest.

    box_labels / present (image-level) / seed_labels / absent partition 1..K.
    V_k maps each box label to its insider nodes; V0 is everything else.
    """

    box_labels: frozenset[int]
    present: frozenset[int]
    seed_labels: frozenset[int]
    absent: frozenset[int]
    V_k: dict[int, np.ndarray] = field(compare=False)
    V0: np.ndarray = field(compare=False)

    @classmethod
    def from_annotation(
        cls, annotation: WeakAnnotation, instance: Instance
    ) -> "LabelPartition":
        K = instance.label_space.K
        box_labels = annotation.box_labels
        present = annotation.image_level
        seed_labels = annotation.seed_labels
        absent = frozenset(range(1, K + 1)) - box_labels - present - seed_labels
        V_k = _boxes.insider_sets_by_label(annotation, instance)
        inside = np.zeros(instance.n_nodes, dtype=bool)
        for nodes in V_k.values():
            inside[nodes] = True
        return cls(
            box_labels=box_labels,
            present=present,
            seed_labels=seed_labels,
            absent=absent,
            V_k=V_k,
            V0=np.flatnonzero(~inside),
        )


def hamming_loss(y, y_gt, pixel_counts) -> float:
    """Weighted Hamming distance; ground-truth-unlabelled nodes are skipped."""
    y = np.asarray(y, np.int64)
    y_gt = np.asarray(y_gt, np.int64)
    c = np.asarray(pixel_counts, float)
    if not (len(y) == len(y_gt) == len(c)):
        raise ValidationError("hamming_loss: length mismatch")
    labelled = y_gt != UNLABELLED
    return float(c[labelled & (y != y_gt)].sum())


def proxy_il_loss(y, y_ref, pixel_counts) -> float:
    """Symmetric label-set proxy: node i pays c_i when its label is missing
    from the other labelling's label set (either direction)."""
    y = np.asarray(y, np.int64)
    y_ref = np.asarray(y_ref, np.int64)
    c = np.asarray(pixel_counts, float)
    used_y = np.unique(y)
    used_ref = np.unique(y_ref)
    bad = ~np.isin(y, used_ref) | ~np.isin(y_ref, used_y)
    return float(c[bad].sum())


def _present_areas(
    present: frozenset[int], base_total: float, config: LossConfig
) -> dict[int, float]:
    if not present:
        return {}
    uniform = base_total / len(present)
    est = config.area_estimates or {}
    return {k: float(est.get(k, uniform)) for k in present}


def il_loss(y, z_il, pixel_counts, config: LossConfig = DEFAULT_LOSS_CONFIG) -> float:
    """Expected-Hamming estimate for an image-level label set."""
    z = frozenset(z_il)
    if not z:
        raise ValidationError("il_loss: empty image-level set")
    y = np.asarray(y, np.int64)
    c = np.asarray(pixel_counts, float)
    total = float(c[~np.isin(y, list(z))].sum())
    areas = _present_areas(z, float(c.sum()), config)
    for k in z:
        if not (y == k).any():
            total += areas[k]
    return total


def il_bb_loss(
    y,
    annotation: WeakAnnotation,
    instance: Instance,
    config: LossConfig = DEFAULT_LOSS_CONFIG,
) -> float:
    """Image-level + bounding-box loss (empty-row/column penalties)."""
    if not annotation.boxes:
        raise ValidationError("il_bb_loss requires boxes")
    return weak_loss(y, annotation, instance, config)


def il_os_loss(
    y,
    annotation: WeakAnnotation,
    instance: Instance,
    config: LossConfig = DEFAULT_LOSS_CONFIG,
) -> float:
    """Image-level + object-seed loss (Gaussian penalties around seeds)."""
    if not annotation.seeds:
        raise ValidationError("il_os_loss requires seeds")
    return weak_loss(y, annotation, instance, config)


def weak_loss(
    y,
    annotation: WeakAnnotation,
    instance: Instance,
    config: LossConfig = DEFAULT_LOSS_CONFIG,
) -> float:
    """Unified weak loss: image-level terms, plus box and seed terms when the
    annotation carries them."""
    y = np.asarray(y, np.int64)
    c = instance.pixel_counts
    part = LabelPartition.from_annotation(annotation, instance)
    total = 0.0
    if part.absent:
        total += float(c[np.isin(y, list(part.absent))].sum())
    areas = _present_areas(part.present, float(c[part.V0].sum()), config)
    for k in sorted(part.present):
        if not (y == k).any():
            total += areas[k]
    beta = config.beta
    for b in annotation.boxes:
        rows, cols = _boxes.row_col_cliques(instance, b)
        nu = b.width / 2.0
        om = b.height / 2.0
        for clique in rows:
            if not (y[clique] == b.label).any():
                total += beta * nu
        for clique in cols:
            if not (y[clique] == b.label).any():
                total += beta * om
    if part.box_labels:
        on_v0 = y[part.V0]
        c_v0 = c[part.V0]
        total += float(c_v0[np.isin(on_v0, list(part.box_labels))].sum())
    if annotation.seeds:
        G = seed_node_weights(instance, annotation)
        for g, s in zip(G, annotation.seeds):
            total += beta * float(g[y != s.label].sum())
    return total


def annotation_loss(y, instance: Instance, annotation, config=None) -> float:
    """Dispatch: Hamming for full labellings, the unified weak loss otherwise."""
    config = config or DEFAULT_LOSS_CONFIG
    if isinstance(annotation, FullLabelling):
        return hamming_loss(y, annotation.labels, instance.pixel_counts)
    return weak_loss(y, annotation, instance, config)


def seed_taus(instance: Instance, annotation: WeakAnnotation) -> dict[int, float]:
    """Per seed-label Gaussian area scale: the total pixel mass split between
    image-level labels and seed labels, then between that label's seeds."""
    n_lab = len(annotation.seed_labels)
    denom_labels = len(annotation.image_level) + n_lab
    taus = {}
    for k in annotation.seed_labels:
        n_obj = sum(1 for s in annotation.seeds if s.label == k)
        taus[k] = instance.total_pixels / (denom_labels * n_obj)
    return taus


def seed_node_weights(
    instance: Instance, annotation: WeakAnnotation
) -> list[np.ndarray]:
    """Per seed, per node: summed Gaussian pixel weights (exact, no cutoff)."""
    cache = instance.__dict__.setdefault("_seed_weight_cache", {})
    if annotation in cache:
        return cache[annotation]
    grid = instance.pixel_grid
    taus = seed_taus(instance, annotation)
    rr, cc = np.mgrid[0 : grid.height, 0 : grid.width]
    out = []
    for s in annotation.seeds:
        d2 = (rr - s.row) ** 2.0 + (cc - s.col) ** 2.0
        gpix = np.exp(-math.pi * d2 / taus[s.label])
        out.append(
            np.bincount(
                grid.node_map.ravel(),
                weights=gpix.ravel(),
                minlength=instance.n_nodes,
            )
        )
    cache[annotation] = out
    return out


def build_loss_augmented_energy(
    model: Model,
    instance: Instance,
    annotation,
    config: LossConfig = DEFAULT_LOSS_CONFIG,
) -> EnergyProblem:
    """EnergyProblem whose minimizer maximizes score + annotation loss.

    Full labellings adjust unaries only (margin rescaling).  Image-level
    non-use penalties become per-label usage costs; box row/column penalties
    become clique-OR costs; seed Gaussians stay unary.  All dropped constants
    land in `offset` (energy + offset == -(score + loss), exactly).
    """
    problem = build_energy(model, instance)
    c = instance.pixel_counts
    if isinstance(annotation, FullLabelling):
        gt = annotation.labels
        labelled = np.flatnonzero(gt != UNLABELLED)
        adj = np.zeros_like(problem.unary)
        adj[labelled, :] = -c[labelled, None]
        adj[labelled, gt[labelled] - 1] = 0.0
        problem.unary += adj
        return problem

    part = LabelPartition.from_annotation(annotation, instance)
    if part.absent:
        for k in part.absent:
            problem.unary[:, k - 1] -= c
    areas = _present_areas(part.present, float(c[part.V0].sum()), config)
    label_costs = np.zeros(problem.n_labels)
    for k, area in areas.items():
        label_costs[k - 1] = area
        problem.offset -= area
    problem.label_costs = label_costs
    beta = config.beta
    cliques = []
    for b in annotation.boxes:
        rows, cols = _boxes.row_col_cliques(instance, b)
        nu = beta * (b.width / 2.0)
        om = beta * (b.height / 2.0)
        for clique, cost in [(r, nu) for r in rows] + [(col, om) for col in cols]:
            problem.offset -= cost
            if len(clique) and cost > 0:
                cliques.append(CliqueCost(nodes=clique, label=b.label, cost=cost))
    problem.clique_costs = cliques
    if part.box_labels:
        for k in part.box_labels:
            problem.unary[part.V0, k - 1] -= c[part.V0]
    if annotation.seeds:
        G = seed_node_weights(instance, annotation)
        for g, s in zip(G, annotation.seeds):
            problem.unary -= beta * g[:, None]
            problem.unary[:, s.label - 1] += beta * g
    return problem
