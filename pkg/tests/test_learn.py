import json

import numpy as np
import pytest

import weakseg.learn as learn_mod
from weakseg.core import FullLabelling, Instance, LabelSpace, Model, WeakAnnotation
from weakseg.errors import ValidationError
from weakseg.inference import map_inference
from weakseg.learn import (
    TrainConfig,
    TrainItem,
    WorkingSet,
    hallucinated_baseline,
    load_model,
    save_model,
    separation_oracle,
    solve_qp,
    train_multi_utility,
    train_ssvm,
)

from conftest import grid_edges, block_grid


def toy_instances(n, K=3, noise=0.1, seed=0, weak_from=None, g=3, scale=2):
    """Small separable instances; weak_from onwards get image-level labels."""
    out = []
    edges = grid_edges(g)
    V = g * g
    for i in range(n):
        r = np.random.default_rng([seed, i])
        labels = r.integers(1, K + 1, V)
        feats = np.eye(K)[labels - 1] + noise * r.normal(size=(V, K))
        ann = (
            WeakAnnotation(image_level=frozenset(int(k) for k in np.unique(labels)))
            if weak_from is not None and i >= weak_from
            else FullLabelling(labels)
        )
        out.append(
            Instance(
                id=f"toy-{i}",
                node_features=feats,
                pixel_counts=np.full(V, float(scale * scale)),
                edges=edges,
                edge_features=np.ones((len(edges), 1)),
                label_space=LabelSpace(K),
                pixel_grid=block_grid(g, scale),
                annotation=ann,
            )
        )
    return out


def items_of(instances):
    return [
        TrainItem(inst, inst.annotation.labels, inst.annotation, False)
        for inst in instances
    ]


def test_qp_single_constraint_huge_c():
    ws = WorkingSet(dim=2, rhos=[1000.0], psi_pos=[np.array([1.0, 0.0])])
    # constraint <w, psi> >= 1 with psi = [1, 0] (dim 2: d=1, e=1)
    ws.add(0, np.array([9]), 1.0, np.array([0.0, 0.0]))
    model, info = solve_qp(ws, 1000.0, 1.0, dims=(1, 1, 1))
    assert model.to_vector()[0] == pytest.approx(1.0, abs=1e-6)
    assert ws.slack(0, model.to_vector()) == pytest.approx(0.0, abs=1e-6)


def test_qp_zero_loss_keeps_zero_weights():
    ws = WorkingSet(dim=2, rhos=[5.0], psi_pos=[np.array([1.0, 1.0])])
    ws.add(0, np.array([1]), 0.0, np.array([1.0, 1.0]))  # direction 0, loss 0
    model, _ = solve_qp(ws, 5.0, 1.0, dims=(1, 1, 1))
    assert np.allclose(model.to_vector(), 0.0)


def analytic_two_constraint(rho, d1, l1, d2, l2):
    """Best (w, xi) for one instance, two cuts, by active-set enumeration."""
    best = (np.inf, None)
    # candidate dual points: interior stationary and all boundary cases
    candidates = []
    # both active: solve [G] lambda = l with G_ij = d_i . d_j
    G = np.array([[d1 @ d1, d1 @ d2], [d2 @ d1, d2 @ d2]])
    try:
        lam = np.linalg.solve(G, np.array([l1, l2]))
        candidates.append(lam)
    except np.linalg.LinAlgError:
        pass
    if d1 @ d1 > 0:
        candidates.append(np.array([l1 / (d1 @ d1), 0.0]))
    if d2 @ d2 > 0:
        candidates.append(np.array([0.0, l2 / (d2 @ d2)]))
    candidates.append(np.array([0.0, 0.0]))
    # boundary where lambda sums to rho: 1-d line search solved exactly
    dd = d1 - d2
    if dd @ dd > 0:
        t = ((l1 - l2) - rho * (d2 @ dd)) / (dd @ dd)
        t = min(max(t, 0.0), rho)
        candidates.append(np.array([t, rho - t]))
    for lam in candidates:
        lam = np.clip(lam, 0.0, None)
        if lam.sum() > rho:
            lam = lam * (rho / lam.sum())
        w = lam[0] * d1 + lam[1] * d2
        xi = max(0.0, l1 - w @ d1, l2 - w @ d2)
        obj = 0.5 * w @ w + rho * xi
        if obj < best[0]:
            best = (obj, w)
    return best


def test_qp_two_constraints_vs_analytic(rng):
    for trial in range(20):
        d1 = rng.normal(0, 1, 2)
        d2 = rng.normal(0, 1, 2)
        l1, l2 = rng.uniform(0.2, 2.0, 2)
        rho = float(rng.uniform(0.2, 3.0))
        ws = WorkingSet(dim=2, rhos=[rho], psi_pos=[np.zeros(2)])
        ws.add(0, np.array([1]), l1, -d1)
        ws.add(0, np.array([2]), l2, -d2)
        # dims with e=0: no clipping, pure QP
        model, _ = solve_qp(ws, rho, 1.0, dims=(2, 1, 0), tol=1e-10)
        w = model.to_vector()
        obj = 0.5 * w @ w + rho * ws.slack(0, w)
        want_obj, _ = analytic_two_constraint(rho, d1, l1, d2, l2)
        assert obj == pytest.approx(want_obj, abs=1e-6)


def test_qp_pairwise_block_nonnegative(rng):
    # constraints that pull the pairwise coordinate negative get clipped
    for trial in range(10):
        d = rng.normal(0, 1, 3)
        d[2] = -abs(d[2])  # gradient pushes pairwise negative
        ws = WorkingSet(dim=3, rhos=[5.0], psi_pos=[np.zeros(3)])
        ws.add(0, np.array([1]), 1.0, -d)
        model, _ = solve_qp(ws, 5.0, 1.0, dims=(1, 2, 1))
        assert model.pairwise.min() >= 0.0


def test_separation_zero_model_flips_single_node():
    inst = Instance(
        id="one",
        node_features=np.ones((1, 1)),
        pixel_counts=np.array([1.0]),
        edges=np.empty((0, 2), np.int64),
        edge_features=np.empty((0, 1)),
        label_space=LabelSpace(2),
        annotation=FullLabelling(np.array([1])),
    )
    model = Model.zeros(2, 1, 1)
    ybar, loss, viol = separation_oracle(
        model, inst, inst.annotation.labels, inst.annotation
    )
    assert ybar.tolist() == [2] and loss == 1.0 and viol == pytest.approx(1.0)


def test_separation_violation_arithmetic(rng):
    insts = toy_instances(1, seed=5)
    inst = insts[0]
    model = Model(unary=rng.normal(0, 1, (3, 3)), pairwise=rng.uniform(0, 1, 1))
    from weakseg.core import score
    from weakseg.losses import annotation_loss

    ybar, loss, viol = separation_oracle(
        model, inst, inst.annotation.labels, inst.annotation
    )
    recomputed = (
        score(model, inst, ybar)
        + annotation_loss(ybar, inst, inst.annotation)
        - score(model, inst, inst.annotation.labels)
    )
    assert viol == pytest.approx(recomputed, abs=1e-9)
    assert loss == pytest.approx(annotation_loss(ybar, inst, inst.annotation), abs=1e-9)


def test_train_ssvm_separable_reaches_zero_error():
    insts = toy_instances(4, noise=0.0, seed=7)
    config = TrainConfig(C=100.0, max_cutting_plane_iters=200)
    model, report, viols, ws = train_ssvm(items_of(insts), config)
    assert report["converged"]
    assert max(viols) <= report["epsilon"] + 1e-9 or all(
        ws.slack(n, model.to_vector()) + report["epsilon"] >= viols[n]
        for n in range(len(insts))
    )
    for inst in insts:
        assert np.array_equal(map_inference(model, inst), inst.annotation.labels)


def test_train_ssvm_c_zero_gives_zero_weights():
    insts = toy_instances(2, seed=8)
    model, _, _, _ = train_ssvm(items_of(insts), TrainConfig(C=0.0))
    assert np.allclose(model.to_vector(), 0.0)


def test_train_ssvm_objective_trace_monotone_nondecreasing():
    # the restricted optimum grows as cuts accumulate (and stays >= 0)
    insts = toy_instances(4, noise=0.3, seed=9)
    _, report, _, _ = train_ssvm(items_of(insts), TrainConfig(C=10.0))
    objs = [row["objective"] for row in report["iterations"] if row["new_cuts"] > 0]
    assert all(o >= -1e-12 for o in objs)
    assert all(b >= a - 1e-6 for a, b in zip(objs, objs[1:]))


def test_train_ssvm_every_added_cut_was_violated():
    insts = toy_instances(4, noise=0.3, seed=10)
    _, report, _, _ = train_ssvm(items_of(insts), TrainConfig(C=10.0))
    eps = report["epsilon"]
    for row in report["iterations"]:
        if row["new_cuts"] > 0:
            assert row["max_violation"] > eps


def test_final_model_satisfies_working_set_within_slack():
    insts = toy_instances(4, noise=0.2, seed=11)
    model, report, _, ws = train_ssvm(items_of(insts), TrainConfig(C=10.0))
    w = model.to_vector()
    for n in range(ws.n_instances):
        xi = ws.slack(n, w)
        for loss, dd in zip(ws.losses[n], ws.directions(n)):
            assert loss - float(w @ dd) <= xi + 1e-6


def test_weak_slack_alpha_one_matches_strong():
    # a full labelling treated as a degenerate weak annotation with alpha=1
    # trains identically to the strong path
    insts = toy_instances(3, seed=12)
    cfg = TrainConfig(C=10.0, alpha_balance=1.0)
    strong_items = items_of(insts)
    weak_items = [
        TrainItem(it.instance, it.positive, it.loss_annotation, True)
        for it in strong_items
    ]
    m1, _, _, _ = train_ssvm(strong_items, cfg)
    m2, _, _, _ = train_ssvm(weak_items, cfg)
    assert np.array_equal(m1.to_vector(), m2.to_vector())


def test_multi_utility_degenerate_m0_equals_ssvm():
    insts = toy_instances(3, seed=13)
    cfg = TrainConfig(C=10.0)
    m1, _, _, _ = train_ssvm(items_of(insts), cfg)
    m2, report = train_multi_utility(insts, cfg)
    assert np.array_equal(m1.to_vector(), m2.to_vector())


def test_multi_utility_n0_all_weak_runs():
    insts = toy_instances(3, seed=14, weak_from=0)
    model, report = train_multi_utility(insts, TrainConfig(C=10.0, max_cccp_iters=3))
    assert np.isfinite(report["objective"])
    assert report["phases"]["cccp"]


def test_multi_utility_objective_monotone():
    insts = toy_instances(6, noise=0.4, seed=15, weak_from=2)
    _, report = train_multi_utility(insts, TrainConfig(C=10.0, max_cccp_iters=5))
    objs = [r["objective"] for r in report["phases"]["cccp"]]
    assert all(b <= a + 1e-6 for a, b in zip(objs, objs[1:]))


def test_baseline_all_strong_equals_ssvm():
    insts = toy_instances(3, seed=16)
    cfg = TrainConfig(C=10.0)
    m1, _, _, _ = train_ssvm(items_of(insts), cfg)
    m2, _ = hallucinated_baseline(insts, cfg)
    assert np.array_equal(m1.to_vector(), m2.to_vector())


def test_baseline_requires_strong():
    insts = toy_instances(2, seed=17, weak_from=0)
    with pytest.raises(ValidationError):
        hallucinated_baseline(insts, TrainConfig())


def test_baseline_structural_identity_vs_one_cccp_round(monkeypatch):
    """The baseline equals one CCCP round except for the round-2 loss."""
    insts = toy_instances(5, noise=0.3, seed=18, weak_from=2)
    cfg = TrainConfig(C=10.0, max_cccp_iters=1)
    calls = []
    real = learn_mod.train_ssvm

    def recording(items, config, init=None, loss_config=None, working_set=None):
        calls.append(
            [
                (it.instance.id, it.positive.tobytes(), type(it.loss_annotation).__name__,
                 it.weak_slack)
                for it in items
            ]
        )
        return real(items, config, init, loss_config, working_set)

    monkeypatch.setattr(learn_mod, "train_ssvm", recording)
    learn_mod.train_multi_utility(insts, cfg)
    tmu_calls = calls.copy()
    calls.clear()
    learn_mod.hallucinated_baseline(insts, cfg)
    base_calls = calls.copy()

    # phase 1 (strong-only warm start) identical
    assert tmu_calls[0] == base_calls[0]
    # phase 2: same instances, same positives, same slack weighting; only the
    # loss annotation for weak instances differs (weak vs hallucinated-full)
    tmu2, base2 = tmu_calls[1], base_calls[1]
    assert [(r[0], r[1], r[3]) for r in tmu2] == [(r[0], r[1], r[3]) for r in base2]
    weak_rows = [i for i, r in enumerate(tmu2) if r[3]]
    assert weak_rows
    for i in weak_rows:
        assert tmu2[i][2] == "WeakAnnotation"
        assert base2[i][2] == "FullLabelling"
    for i, r in enumerate(tmu2):
        if i not in weak_rows:
            assert r[2] == base2[i][2] == "FullLabelling"


def test_model_save_load_roundtrip(tmp_path, rng):
    model = Model(unary=rng.normal(0, 1, (3, 4)), pairwise=rng.uniform(0, 1, 2))
    p1 = tmp_path / "m1.json"
    p2 = tmp_path / "m2.json"
    save_model(model, p1)
    loaded = load_model(p1)
    assert np.array_equal(loaded.unary, model.unary)
    assert np.array_equal(loaded.pairwise, model.pairwise)
    save_model(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_model_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"format": "nope"}))
    with pytest.raises(ValidationError):
        load_model(p)
