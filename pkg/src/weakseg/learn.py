"""Cutting-plane SSVM over mixed strong/weak data, and the CCCP outer loop.

The trainer is an n-slack margin-rescaling cutting plane: one slack per
instance, most-violated constraints found by loss-augmented expansion, and a
dual coordinate-ascent QP.  The pairwise block is kept nonnegative inside the
QP via clipping, which is the exact KKT form of the constrained optimum (the
multiplier of w_p >= 0 folds into the clip).

The outer loop (CCCP) alternates imputing weak labellings and re-solving the
convex inner problem.  Because both inference steps are approximate, each
round keeps the better of (new imputation, previous imputation) per instance
and the better of (new weights, previous weights) by the true objective, so
the recorded objective is non-increasing by construction; a violation is a
hard error, not a warning.

Model files are JSON with a fixed field order (format, version, K, d, e,
unary, pairwise), so identical models serialize byte-identically.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (
    FullLabelling,
    Instance,
    Model,
    WeakAnnotation,
    generalized_features,
    score,
)
from .errors import InvariantBreachError, ValidationError
from .inference import (
    alpha_expansion,
    annotation_consistent_inference,
    argmin_unary_init,
)
from .losses import DEFAULT_LOSS_CONFIG, LossConfig, annotation_loss, build_loss_augmented_energy

CCCP_MONOTONE_TOL = 1e-6
IMPUTATION_REL_TOL = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of the trainer; epsilon is relative to the mean total pixel
    count so margins stay commensurate with pixel-denominated losses."""

    C: float = 10.0
    alpha_balance: float = 0.1
    epsilon: float = 1e-3
    max_cutting_plane_iters: int = 200
    max_cccp_iters: int = 10
    warm_start: bool = True
    max_qp_passes: int = 2000
    qp_tol: float = 1e-6
    jobs: int = 1

    def __post_init__(self):
        if self.C < 0 or self.alpha_balance <= 0 or self.epsilon <= 0:
            raise ValidationError("C >= 0, alpha_balance > 0, epsilon > 0 required")


@dataclass
class TrainItem:
    """One training example: the margin reference labelling plus the
    annotation driving its loss, and whether its slack is weak-weighted."""

    instance: Instance
    positive: np.ndarray
    loss_annotation: object  # FullLabelling | WeakAnnotation
    weak_slack: bool


class WorkingSet:
    """Per-instance constraint store with persistent dual variables.

    Each stored cut keeps Psi(x, y_bar) so the constraint direction
    Psi(x, y_pos) - Psi(x, y_bar) can be refreshed when an imputed positive
    changes; weak losses depend only on y_bar, so stored losses stay valid.
    """

    def __init__(self, dim: int, rhos: list[float], psi_pos: list[np.ndarray]):
        self.dim = dim
        self.rhos = list(rhos)
        self.psi_pos = [p.copy() for p in psi_pos]
        self.psi_bars: list[list[np.ndarray]] = [[] for _ in rhos]
        self.losses: list[list[float]] = [[] for _ in rhos]
        self.lambdas: list[list[float]] = [[] for _ in rhos]
        self.keys: list[set[bytes]] = [set() for _ in rhos]
        self._dir_cache: list[Optional[np.ndarray]] = [None for _ in rhos]

    @property
    def n_instances(self) -> int:
        return len(self.rhos)

    def n_constraints(self) -> int:
        return sum(len(ls) for ls in self.losses)

    def add(self, n: int, labelling: np.ndarray, loss: float, psi_bar: np.ndarray) -> bool:
        key = labelling.astype(np.int64).tobytes()
        if key in self.keys[n]:
            return False
        self.keys[n].add(key)
        self.psi_bars[n].append(psi_bar.astype(float))
        self.losses[n].append(float(loss))
        self.lambdas[n].append(0.0)
        self._dir_cache[n] = None
        return True

    def refresh_positive(self, n: int, psi_pos: np.ndarray):
        self.psi_pos[n] = psi_pos.astype(float)
        self._dir_cache[n] = None

    def direction_matrix(self, n: int) -> np.ndarray:
        """(m, dim) matrix of Psi(pos) - Psi(y_bar) rows."""
        if self._dir_cache[n] is None:
            if self.psi_bars[n]:
                self._dir_cache[n] = self.psi_pos[n][None, :] - np.vstack(
                    self.psi_bars[n]
                )
            else:
                self._dir_cache[n] = np.zeros((0, self.dim))
        return self._dir_cache[n]

    def directions(self, n: int) -> list[np.ndarray]:
        return list(self.direction_matrix(n))

    def weight_vector(self) -> np.ndarray:
        v = np.zeros(self.dim)
        for n in range(self.n_instances):
            if self.lambdas[n]:
                v += np.asarray(self.lambdas[n]) @ self.direction_matrix(n)
        return v

    def slack(self, n: int, w: np.ndarray) -> float:
        if not self.losses[n]:
            return 0.0
        g = np.asarray(self.losses[n]) - self.direction_matrix(n) @ w
        return max(0.0, float(g.max()))


def _clip_pairwise(v: np.ndarray, K: int, d: int) -> np.ndarray:
    w = v.copy()
    w[K * d :] = np.maximum(w[K * d :], 0.0)
    return w


def solve_qp(
    working_set: WorkingSet,
    C: float,
    alpha_balance: float,
    weights_in: Optional[Model] = None,
    *,
    dims: tuple[int, int, int],
    max_passes: int = 2000,
    tol: float = 1e-6,
) -> tuple[Model, dict]:
    """Dual coordinate ascent on the n-slack QP with w_p >= 0 via clipping.

    Ascent steps use the unclipped curvature ||d||^2, an upper bound on the
    true (clipped) curvature, so every step is safeguarded uphill.  Stops when
    the KKT residual drops below tol * (1 + ||w||).
    """
    K, d_feat, e_feat = dims
    ws = working_set
    v = ws.weight_vector()
    w = _clip_pairwise(v, K, d_feat)

    active = [n for n in range(ws.n_instances) if ws.losses[n]]
    D = {n: ws.direction_matrix(n) for n in active}
    L = {n: np.asarray(ws.losses[n]) for n in active}
    lam = {n: np.asarray(ws.lambdas[n], float) for n in active}
    sq = {n: np.einsum("ij,ij->i", D[n], D[n]) for n in active}

    def kkt_residual() -> float:
        res = 0.0
        for n in active:
            g = L[n] - D[n] @ w
            s_n = max(0.0, float(g.max()))
            if ws.rhos[n] - lam[n].sum() > 1e-12 * max(1.0, ws.rhos[n]):
                res = max(res, s_n)
            held = lam[n] > 0
            if held.any():
                res = max(res, s_n - float(g[held].min()))
        return res

    def step(n, c, room):
        nonlocal v, w
        dd = D[n][c]
        g = L[n][c] - float(w @ dd)
        if sq[n][c] > 0:
            t = g / sq[n][c]
        else:
            t = room if g > 0 else -lam[n][c]
        t = min(max(t, -float(lam[n][c])), room)
        if t != 0.0:
            lam[n][c] += t
            v += t * dd
            w = _clip_pairwise(v, K, d_feat)
        return t

    passes = 0
    converged = False
    for passes in range(1, max_passes + 1):
        for n in active:
            m = len(L[n])
            g = L[n] - D[n] @ w
            room = ws.rhos[n] - float(lam[n].sum())
            # raise the most violated constraint
            c1 = int(np.argmax(g))
            step(n, c1, room)
            # release mass from the worst over-held constraint
            held = np.flatnonzero(lam[n] > 0)
            if len(held):
                c3 = int(held[np.argmin(g[held])])
                if c3 != c1:
                    step(n, c3, ws.rhos[n] - float(lam[n].sum()))
            # pairwise exchange when the sum constraint binds
            if m > 1 and ws.rhos[n] - lam[n].sum() <= 1e-12 * max(1.0, ws.rhos[n]):
                g = L[n] - D[n] @ w
                c1 = int(np.argmax(g))
                others = np.flatnonzero((lam[n] > 0) & (np.arange(m) != c1))
                if len(others):
                    c2 = int(others[np.argmin(g[others])])
                    dd = D[n][c1] - D[n][c2]
                    den = float(dd @ dd)
                    if den > 0:
                        t = (g[c1] - g[c2]) / den
                        t = min(max(t, -float(lam[n][c1])), float(lam[n][c2]))
                        if t != 0.0:
                            lam[n][c1] += t
                            lam[n][c2] -= t
                            v += t * dd
                            w = _clip_pairwise(v, K, d_feat)
        res = kkt_residual()
        if res <= tol * (1.0 + float(np.linalg.norm(w))):
            converged = True
            break

    for n in active:
        ws.lambdas[n] = lam[n].tolist()
    model = Model.from_vector(w, K, d_feat, e_feat)
    info = {
        "qp_passes": passes,
        "qp_kkt_residual": kkt_residual(),
        "qp_converged": converged,
    }
    return model, info


def separation_oracle(
    model: Model,
    instance: Instance,
    positive_labelling: np.ndarray,
    annotation,
    loss_config: LossConfig = DEFAULT_LOSS_CONFIG,
) -> tuple[np.ndarray, float, float]:
    """Most-violated labelling: argmax score + loss via expansion; returns
    (labelling, loss, violation), violation relative to the positive."""
    problem = build_loss_augmented_energy(model, instance, annotation, loss_config)
    ybar = alpha_expansion(problem, argmin_unary_init(problem))
    loss = annotation_loss(ybar, instance, annotation, loss_config)
    violation = (
        score(model, instance, ybar) + loss - score(model, instance, positive_labelling)
    )
    return ybar, loss, violation


def _separation_pass(model, items, loss_config, jobs=1):
    if jobs > 1 and len(items) > 1:
        args = [
            (model, it.instance, it.positive, it.loss_annotation, loss_config)
            for it in items
        ]
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_sep_star, args, chunksize=max(1, len(args) // jobs)))
    return [
        separation_oracle(model, it.instance, it.positive, it.loss_annotation, loss_config)
        for it in items
    ]


def _sep_star(args):
    return separation_oracle(*args)


def _rhos(items: list[TrainItem], C: float, alpha_balance: float) -> list[float]:
    n_total = len(items)
    return [
        (C / n_total) * (alpha_balance if it.weak_slack else 1.0) for it in items
    ]


def effective_epsilon(items: list[TrainItem], config: TrainConfig) -> float:
    mean_px = float(np.mean([it.instance.total_pixels for it in items]))
    return config.epsilon * mean_px


def train_ssvm(
    items: list[TrainItem],
    config: TrainConfig,
    init: Optional[Model] = None,
    loss_config: LossConfig = DEFAULT_LOSS_CONFIG,
    working_set: Optional[WorkingSet] = None,
) -> tuple[Model, dict, list[float], WorkingSet]:
    """n-slack cutting plane to tolerance epsilon (relative; see config).

    Returns (model, report, final_violations, working_set); the violations
    are the separation results at the returned weights, one per instance.
    """
    if not items:
        raise ValidationError("empty training set")
    inst0 = items[0].instance
    dims = (inst0.label_space.K, inst0.node_features.shape[1], inst0.edge_features.shape[1])
    dim = dims[0] * dims[1] + dims[2]
    eps = effective_epsilon(items, config)
    rhos = _rhos(items, config.C, config.alpha_balance)
    psi_pos = [generalized_features(it.instance, it.positive) for it in items]
    if working_set is None:
        ws = WorkingSet(dim, rhos, psi_pos)
    else:
        ws = working_set
        ws.rhos = rhos
        for n, p in enumerate(psi_pos):
            ws.refresh_positive(n, p)

    model = init if init is not None else Model.zeros(*dims)
    trace = []
    converged = False
    final_viols = [0.0] * len(items)
    t0 = time.perf_counter()
    for iteration in range(1, config.max_cutting_plane_iters + 1):
        results = _separation_pass(model, items, loss_config, config.jobs)
        w_vec = model.to_vector()
        new_cuts = 0
        max_excess = 0.0
        for n, (ybar, loss, viol) in enumerate(results):
            final_viols[n] = viol
            xi = ws.slack(n, w_vec)
            excess = viol - xi
            max_excess = max(max_excess, excess)
            if excess > eps:
                if ws.add(n, ybar, loss, generalized_features(items[n].instance, ybar)):
                    new_cuts += 1
        if new_cuts == 0:
            converged = True
            trace.append(
                {
                    "iteration": iteration,
                    "objective": _restricted_objective(ws, w_vec, rhos),
                    "max_violation": max_excess,
                    "new_cuts": 0,
                }
            )
            break
        # the inner QP only needs accuracy well under the cutting-plane
        # tolerance; pixel-denominated losses make the spec-level default
        # needlessly tight here
        model, qp_info = solve_qp(
            ws,
            config.C,
            config.alpha_balance,
            model,
            dims=dims,
            max_passes=config.max_qp_passes,
            tol=max(config.qp_tol, 0.01 * eps),
        )
        trace.append(
            {
                "iteration": iteration,
                "objective": _restricted_objective(ws, model.to_vector(), rhos),
                "max_violation": max_excess,
                "new_cuts": new_cuts,
                **qp_info,
            }
        )
    report = {
        "iterations": trace,
        "converged": converged,
        "epsilon": eps,
        "n_constraints": ws.n_constraints(),
        "wall_time_s": time.perf_counter() - t0,
    }
    return model, report, final_viols, ws


def _restricted_objective(ws: WorkingSet, w: np.ndarray, rhos: list[float]) -> float:
    obj = 0.5 * float(w @ w)
    for n in range(ws.n_instances):
        obj += rhos[n] * ws.slack(n, w)
    return obj


def true_objective(
    model: Model,
    items: list[TrainItem],
    config: TrainConfig,
    loss_config: LossConfig,
    violations: Optional[list[float]] = None,
) -> float:
    """The multi-utility minimand at the current weights and imputations."""
    if violations is None:
        violations = [
            v for _, _, v in _separation_pass(model, items, loss_config, config.jobs)
        ]
    rhos = _rhos(items, config.C, config.alpha_balance)
    w = model.to_vector()
    obj = 0.5 * float(w @ w)
    for rho, viol in zip(rhos, violations):
        obj += rho * max(0.0, viol)
    return obj


def _strong_weak_split(dataset: list[Instance]):
    strong = [inst for inst in dataset if isinstance(inst.annotation, FullLabelling)]
    weak = [inst for inst in dataset if isinstance(inst.annotation, WeakAnnotation)]
    return strong, weak


def _strong_items(instances: list[Instance]) -> list[TrainItem]:
    return [
        TrainItem(
            instance=inst,
            positive=inst.annotation.labels,
            loss_annotation=inst.annotation,
            weak_slack=False,
        )
        for inst in instances
    ]


def train_multi_utility(
    dataset: list[Instance],
    config: TrainConfig,
    loss_config: LossConfig = DEFAULT_LOSS_CONFIG,
) -> tuple[Model, dict]:
    """CCCP over the multi-utility objective: impute weak positives by
    annotation-consistent inference, then cutting-plane with per-annotation
    losses, weak slacks weighted by alpha_balance.  The recorded objective is
    non-increasing across rounds (hard invariant)."""
    strong, weak = _strong_weak_split(dataset)
    if not strong and not weak:
        raise ValidationError("empty training set")
    for inst in dataset:
        if inst.annotation is None:
            raise ValidationError(f"instance {inst.id} lacks an annotation")
    t0 = time.perf_counter()
    report: dict = {"phases": {}}

    model = None
    if strong and config.warm_start:
        model, warm_report, _, _ = train_ssvm(
            _strong_items(strong), config, None, loss_config
        )
        report["phases"]["warm_start"] = warm_report
    if not weak:
        if model is None:
            model, inner_report, _, _ = train_ssvm(
                _strong_items(strong), config, None, loss_config
            )
            report["phases"]["inner"] = inner_report
        report["phases"]["cccp"] = []
        report["wall_time_s"] = time.perf_counter() - t0
        report["objective"] = true_objective(
            model, _strong_items(strong), config, loss_config
        )
        return model, report

    dims_inst = dataset[0]
    dims = (
        dims_inst.label_space.K,
        dims_inst.node_features.shape[1],
        dims_inst.edge_features.shape[1],
    )
    if model is None:
        model = Model.zeros(*dims)

    imputations: list[Optional[np.ndarray]] = [None] * len(weak)
    items: list[TrainItem] = _strong_items(strong) + [
        TrainItem(inst, np.empty(0, np.int64), inst.annotation, True) for inst in weak
    ]
    ws: Optional[WorkingSet] = None
    rounds = []
    prev_obj = None
    for rnd in range(1, config.max_cccp_iters + 1):
        changes = 0
        for m, inst in enumerate(weak):
            cand = annotation_consistent_inference(
                model, inst, inst.annotation, init=imputations[m]
            )
            if imputations[m] is None:
                imputations[m] = cand
                changes += 1
            else:
                # keep the better imputation under the current weights
                if score(model, inst, cand) > score(model, inst, imputations[m]):
                    if not np.array_equal(cand, imputations[m]):
                        changes += 1
                    imputations[m] = cand
            items[len(strong) + m].positive = imputations[m]
        obj_imputed = true_objective(model, items, config, loss_config)

        new_model, inner_report, viols, ws = train_ssvm(
            items, config, model, loss_config, working_set=ws
        )
        obj_new = true_objective(
            new_model,
            items,
            config,
            loss_config,
            viols if inner_report["converged"] else None,
        )
        if obj_new <= obj_imputed:
            model = new_model
            round_obj = obj_new
            accepted = "cutting_plane"
        else:
            round_obj = obj_imputed
            accepted = "kept_previous_weights"
        rounds.append(
            {
                "round": rnd,
                "objective": round_obj,
                "imputation_changes": changes,
                "inner": inner_report,
                "accepted": accepted,
            }
        )
        if prev_obj is not None and round_obj > prev_obj + CCCP_MONOTONE_TOL:
            raise InvariantBreachError(
                f"CCCP objective increased: {prev_obj} -> {round_obj}"
            )
        stop = rnd > 1 and changes == 0
        if prev_obj is not None and prev_obj > 0:
            if (prev_obj - round_obj) / prev_obj < IMPUTATION_REL_TOL:
                stop = True
        prev_obj = round_obj
        if stop:
            break
    report["phases"]["cccp"] = rounds
    report["objective"] = prev_obj
    report["wall_time_s"] = time.perf_counter() - t0
    return model, report


def hallucinated_baseline(
    dataset: list[Instance],
    config: TrainConfig,
    loss_config: LossConfig = DEFAULT_LOSS_CONFIG,
) -> tuple[Model, dict]:
    """Sequential baseline: strong-only SSVM, one imputation pass, then SSVM
    treating the imputations as ground truth with the strong Hamming loss."""
    strong, weak = _strong_weak_split(dataset)
    if not strong:
        raise ValidationError("hallucinated baseline needs fully-labelled instances")
    t0 = time.perf_counter()
    model, warm_report, _, _ = train_ssvm(
        _strong_items(strong), config, None, loss_config
    )
    report = {"phases": {"warm_start": warm_report}}
    if weak:
        items = _strong_items(strong)
        for inst in weak:
            imputed = annotation_consistent_inference(model, inst, inst.annotation)
            items.append(
                TrainItem(
                    instance=inst,
                    positive=imputed,
                    loss_annotation=FullLabelling(imputed),
                    weak_slack=True,
                )
            )
        model, inner_report, _, _ = train_ssvm(items, config, model, loss_config)
        report["phases"]["inner"] = inner_report
    report["wall_time_s"] = time.perf_counter() - t0
    return model, report


MODEL_FORMAT = "weakseg-model"
MODEL_VERSION = 1


def save_model(model: Model, path):
    """Versioned JSON with fixed field order; byte-stable for identical weights."""
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "K": model.K,
        "d": model.d,
        "e": model.e,
        "unary": [[float(x) for x in row] for row in model.unary],
        "pairwise": [float(x) for x in model.pairwise],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_model(path) -> Model:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != MODEL_FORMAT or payload.get("version") != MODEL_VERSION:
        raise ValidationError(f"{path}: not a weakseg model file (v{MODEL_VERSION})")
    model = Model(
        unary=np.array(payload["unary"], float),
        pairwise=np.array(payload["pairwise"], float),
    )
    if model.K != payload["K"] or model.d != payload["d"] or model.e != payload["e"]:
        raise ValidationError(f"{path}: header dims disagree with weight blocks")
    return model
