import math

import numpy as np
import pytest

from weakseg.core import (
    BoundingBox,
    FullLabelling,
    Instance,
    LabelSpace,
    Model,
    PixelGrid,
    Seed,
    WeakAnnotation,
    score,
)
from weakseg.errors import ValidationError
from weakseg.inference import energy
from weakseg.losses import (
    LossConfig,
    annotation_loss,
    build_loss_augmented_energy,
    hamming_loss,
    il_bb_loss,
    il_loss,
    il_os_loss,
    proxy_il_loss,
    seed_node_weights,
    seed_taus,
    weak_loss,
)

from conftest import make_instance


def unit_grid_instance(h, w, K=4, annotation=None, seed=0):
    """h x w image of 1-pixel superpixels (node = pixel, row-major)."""
    rng = np.random.default_rng(seed)
    V = h * w
    nm = np.arange(V).reshape(h, w)
    edges = []
    for r in range(h):
        for c in range(w):
            i = w * r + c
            if c < w - 1:
                edges.append((i, i + 1))
            if r < h - 1:
                edges.append((i, i + w))
    return Instance(
        id="unit",
        node_features=rng.normal(0, 1, (V, 2)),
        pixel_counts=np.ones(V),
        edges=np.array(edges),
        edge_features=rng.uniform(0, 1, (len(edges), 1)),
        label_space=LabelSpace(K),
        pixel_grid=PixelGrid(h, w, nm),
        annotation=annotation,
    )


def test_hamming_examples():
    c4 = np.full(4, 4.0)
    assert hamming_loss([1, 2, 2, 2], [1, 2, 2, 2], c4) == 0.0
    assert hamming_loss([1, 1, 2, 2], [1, 2, 2, 2], c4) == 4.0
    assert hamming_loss([1, 1, 2, 2], [0, 0, 0, 0], c4) == 0.0
    with pytest.raises(ValidationError):
        hamming_loss([1, 2], [1], [1.0])


def test_proxy_il_examples(rng):
    c4 = np.full(4, 4.0)
    assert proxy_il_loss([1, 1, 2, 2], [1, 1, 2, 2], c4) == 0.0
    assert proxy_il_loss([1, 1, 1, 1], [1, 1, 2, 2], c4) == 8.0
    for _ in range(100):
        y1 = rng.integers(1, 4, 6)
        y2 = rng.integers(1, 4, 6)
        c = rng.uniform(0.5, 3, 6)
        assert proxy_il_loss(y1, y2, c) == pytest.approx(proxy_il_loss(y2, y1, c))


def test_il_loss_examples():
    c4 = np.full(4, 4.0)
    assert il_loss([1, 1, 2, 2], {1, 2}, c4) == 0.0
    assert il_loss([1, 1, 1, 1], {1, 2}, c4) == pytest.approx(8.0)
    assert il_loss([3, 3, 1, 2], {1, 2}, c4) == pytest.approx(8.0)
    with pytest.raises(ValidationError):
        il_loss([1], set(), [1.0])


def test_il_loss_area_estimates():
    c4 = np.full(4, 4.0)
    cfg = LossConfig(area_estimates={1: 3.0, 2: 5.0})
    assert il_loss([1, 1, 1, 1], {1, 2}, c4, cfg) == pytest.approx(5.0)


def test_il_loss_expectation_property(rng):
    # the default S_k equals the parameterized bound at uniform expected areas
    c = rng.uniform(0.5, 2.0, 6)
    z = {1, 3}
    uniform = {k: float(c.sum()) / len(z) for k in z}
    for _ in range(20):
        y = rng.integers(1, 5, 6)
        assert il_loss(y, z, c) == pytest.approx(
            il_loss(y, z, c, LossConfig(area_estimates=uniform))
        )


def test_il_bb_spec_example():
    # 4x4 grid of 1-pixel superpixels, one 2x2 box for label 2, interior
    # entirely non-2, beta=1 -> row/col term contributes 4
    ann = WeakAnnotation(image_level={1}, boxes=(BoundingBox(2, 1, 1, 2, 2),))
    inst = unit_grid_instance(4, 4, annotation=ann)
    y = np.ones(16, np.int64)
    assert il_bb_loss(y, ann, inst) == pytest.approx(4.0)


def test_il_bb_outside_box_term():
    # 1x8 image: node 0 owns 7 pixels, node 1 owns 1; box over node 1
    nm = np.array([[0, 0, 0, 0, 0, 0, 0, 1]])
    inst = Instance(
        id="two-node",
        node_features=np.zeros((2, 1)),
        pixel_counts=np.array([7.0, 1.0]),
        edges=np.array([[0, 1]]),
        edge_features=np.array([[0.5]]),
        label_space=LabelSpace(3),
        pixel_grid=PixelGrid(1, 8, nm),
    )
    ann = WeakAnnotation(image_level={1}, boxes=(BoundingBox(2, 7, 0, 7, 0),))
    # box label on the V_0 node: term4 pays its 7 pixels; missing image-level
    # label 1 pays sigma = 7/1
    assert weak_loss([2, 2], ann, inst) == pytest.approx(7.0 + 7.0)
    assert weak_loss([1, 2], ann, inst) == pytest.approx(0.0)


def test_weak_loss_nonnegative_and_zero_when_consistent(rng):
    from weakseg import data as data_mod

    ds = data_mod.synth_generate(
        data_mod.SynthConfig(grid=5, scale=4, n_stuff=2, n_things=2,
                             noise=0.2, n_instances=6, seed=3)
    )
    for inst in ds.instances:
        gt = inst.annotation.labels
        ann = data_mod.derive_weak_annotation(inst, ds.header, use_boxes=True)
        loss = weak_loss(gt, ann, inst)
        assert loss == pytest.approx(0.0, abs=1e-9)
        for _ in range(5):
            y = rng.integers(1, 5, inst.n_nodes)
            assert weak_loss(y, ann, inst) >= 0


def test_upper_bound_property(rng):
    # K_il with S_k taken from any consistent full labelling upper-bounds the
    # symmetric proxy loss against that labelling (2x2, K=3, exhaustive)
    from itertools import product

    inst = unit_grid_instance(2, 2, K=3)
    z = {1, 2}
    c = inst.pixel_counts
    consistent = [
        np.array(t)
        for t in product([1, 2, 3], repeat=4)
        if set(t) == z
    ]
    assert consistent
    for _ in range(100):
        y = rng.integers(1, 4, 4)
        for ybar in consistent:
            areas = {k: float(c[ybar == k].sum()) for k in z}
            k_il = il_loss(y, z, c, LossConfig(area_estimates=areas))
            delta = proxy_il_loss(y, ybar, c)
            assert k_il >= delta - 1e-12


def test_seed_tau_formula():
    # 120 pixels total, |z_il| = 2, two seeds of label 3 and one of label 4
    nm = np.zeros((1, 120), np.int64)
    nm[0, 60:] = 1
    inst = Instance(
        id="tau",
        node_features=np.zeros((2, 1)),
        pixel_counts=np.array([60.0, 60.0]),
        edges=np.array([[0, 1]]),
        edge_features=np.array([[1.0]]),
        label_space=LabelSpace(4),
        pixel_grid=PixelGrid(1, 120, nm),
    )
    ann = WeakAnnotation(
        image_level={1, 2},
        seeds=(Seed(3, 0, 10), Seed(3, 0, 80), Seed(4, 0, 40)),
    )
    taus = seed_taus(inst, ann)
    assert taus[3] == pytest.approx(15.0)
    assert taus[4] == pytest.approx(30.0)


def test_seed_center_pixel_penalty_exact():
    # mislabelling the seed's superpixel adds exactly beta at the centre
    # (1-pixel superpixels make the node weight exp(0) = 1 exactly)
    ann = WeakAnnotation(image_level={1}, seeds=(Seed(2, 1, 1),))
    inst = unit_grid_instance(3, 3, K=3, annotation=ann)
    beta = 0.7
    cfg = LossConfig(beta=beta)
    y_ok = np.ones(9, np.int64)
    y_ok[4] = 2  # node 4 owns pixel (1,1)
    y_bad = np.ones(9, np.int64)
    assert il_os_loss(y_bad, ann, inst, cfg) - il_os_loss(y_ok, ann, inst, cfg) == (
        pytest.approx(beta, abs=1e-12)
    )


def test_seed_gaussian_mass_near_tau():
    # fully absent seed label on a 32x32 image: the Gaussian term is close to
    # tau (the estimated label area)
    h = w = 32
    ann = WeakAnnotation(image_level={1, 2, 3}, seeds=(Seed(4, 16, 16),))
    inst = unit_grid_instance(h, w, K=4, annotation=ann)
    tau = seed_taus(inst, ann)[4]
    assert tau == pytest.approx(h * w / 4)
    y = np.ones(h * w, np.int64)  # label 4 nowhere
    gauss = sum(
        float(g[y != s.label].sum())
        for g, s in zip(seed_node_weights(inst, ann), ann.seeds)
    )
    assert abs(gauss - tau) / tau < 0.05


def test_bb_term_scale_matches_area_estimate():
    # a fully missing box label pays beta * box area through rows+columns,
    # the same scale as the image-level area estimate
    ann = WeakAnnotation(image_level={1}, boxes=(BoundingBox(2, 1, 1, 4, 3),))
    inst = unit_grid_instance(6, 6, K=3, annotation=ann)
    box = ann.boxes[0]
    y = np.ones(36, np.int64)
    loss = il_bb_loss(y, ann, inst)
    # no absent labels used, image-level label present, no stray box labels:
    # everything left is the empty-row/column term
    assert loss == pytest.approx(box.width * box.height)
    z_only = WeakAnnotation(image_level={1, 2})
    y_missing_2 = np.ones(36, np.int64)
    assert il_loss(y_missing_2, {1, 2}, inst.pixel_counts) == pytest.approx(
        36.0 / 2
    )


def test_loss_augmented_affine_identity_all_types(rng):
    anns = {
        "full": FullLabelling(rng.integers(1, 5, 16)),
        "il": WeakAnnotation(image_level={1, 2}),
        "bb": WeakAnnotation(image_level={1}, boxes=(BoundingBox(3, 2, 2, 5, 7),)),
        "os": WeakAnnotation(image_level={1, 2}, seeds=(Seed(3, 4, 4),)),
        "bb+os": WeakAnnotation(
            image_level={1},
            boxes=(BoundingBox(3, 0, 0, 3, 3),),
            seeds=(Seed(4, 6, 6),),
        ),
    }
    cfg = LossConfig(beta=0.8)
    model = Model(unary=rng.normal(0, 1, (4, 3)), pairwise=rng.uniform(0, 1, 2))
    for name, ann in anns.items():
        inst = make_instance(g=4, scale=2, K=4, seed=60, annotation=ann)
        prob = build_loss_augmented_energy(model, inst, ann, cfg)
        for _ in range(50):
            y = rng.integers(1, 5, 16)
            lhs = energy(prob, y) + prob.offset
            rhs = -(score(model, inst, y) + annotation_loss(y, inst, ann, cfg))
            assert lhs == pytest.approx(rhs, abs=1e-9), name


def test_loss_augmented_zero_model_flips_gt():
    # zero weights: the maximizer of score+loss maximizes the loss alone
    from weakseg.inference import alpha_expansion, argmin_unary_init

    gt = FullLabelling(np.array([1]))
    inst = Instance(
        id="one",
        node_features=np.ones((1, 1)),
        pixel_counts=np.array([1.0]),
        edges=np.empty((0, 2), np.int64),
        edge_features=np.empty((0, 1)),
        label_space=LabelSpace(2),
        pixel_grid=None,
        annotation=gt,
    )
    prob = build_loss_augmented_energy(Model.zeros(2, 1, 1), inst, gt)
    y = alpha_expansion(prob, argmin_unary_init(prob))
    assert y.tolist() == [2]


def test_loss_augmented_argmax_matches_enumeration(rng):
    # energy argmin reproduces the exhaustive argmax of score + K_il
    from weakseg.inference import alpha_expansion, argmin_unary_init
    from weakseg.oracle import brute_force_max_score_plus_loss

    ann = WeakAnnotation(image_level={1, 2})
    inst = make_instance(g=2, scale=2, K=3, seed=61, annotation=ann)
    for trial in range(10):
        model = Model(
            unary=rng.normal(0, 1, (3, 3)), pairwise=rng.uniform(0, 0.5, 2)
        )
        prob = build_loss_augmented_energy(model, inst, ann)
        y = alpha_expansion(prob, argmin_unary_init(prob))
        got = score(model, inst, y) + annotation_loss(y, inst, ann)
        _, want = brute_force_max_score_plus_loss(model, inst, ann)
        assert got <= want + 1e-9
        assert got == pytest.approx(want, abs=1e-6)
