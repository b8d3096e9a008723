"""Dataset serialization, synthetic data, weak-annotation derivation, metrics.

On-disk format is JSON Lines: a header line (format version, K, d, e, label
names, background labels, optional reserved "other" label id) followed by one
instance per line.  Labels are serialized 0-based (in memory they are 1-based
with 0 = unlabelled; on disk unlabelled is null).  Saving is canonical, so
save(load(f)) reproduces f byte-for-byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import (
    BoundingBox,
    FullLabelling,
    Instance,
    LabelSpace,
    PixelGrid,
    Seed,
    UNLABELLED,
    WeakAnnotation,
)
from .errors import ValidationError

FORMAT_VERSION = 1
OTHER_RULE_UNLABELLED_FRACTION = 0.3
FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class DatasetHeader:
    K: int
    d: int
    e: int
    label_names: list[str] = field(default_factory=list)
    background_labels: list[int] = field(default_factory=list)
    other_label: Optional[int] = None
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if not self.label_names:
            self.label_names = [f"label_{k}" for k in range(1, self.K + 1)]
        if len(self.label_names) != self.K:
            raise ValidationError("label_names length must equal K")
        if self.other_label is not None and self.other_label != self.K:
            raise ValidationError("the reserved 'other' label must be id K")

    @property
    def thing_labels(self) -> list[int]:
        return [k for k in range(1, self.K + 1) if k not in self.background_labels]


@dataclass
class Dataset:
    header: DatasetHeader
    instances: list[Instance]

    def __len__(self):
        return len(self.instances)


def _labels_out(arr: np.ndarray) -> list:
    return [None if v == UNLABELLED else int(v) - 1 for v in arr]


def _labels_in(vals: list) -> np.ndarray:
    return np.array([UNLABELLED if v is None else int(v) + 1 for v in vals], np.int64)


def _annotation_out(ann) -> Optional[dict]:
    if ann is None:
        return None
    if isinstance(ann, FullLabelling):
        return {"type": "full", "labels": _labels_out(ann.labels)}
    return {
        "type": "weak",
        "image_level": sorted(k - 1 for k in ann.image_level),
        "boxes": [
            {
                "label": b.label - 1,
                "left": b.left,
                "top": b.top,
                "right": b.right,
                "bottom": b.bottom,
            }
            for b in ann.boxes
        ],
        "seeds": [{"label": s.label - 1, "row": s.row, "col": s.col} for s in ann.seeds],
    }


def _annotation_in(obj) -> Optional[object]:
    if obj is None:
        return None
    if obj["type"] == "full":
        return FullLabelling(_labels_in(obj["labels"]))
    if obj["type"] == "weak":
        return WeakAnnotation(
            image_level=frozenset(int(k) + 1 for k in obj["image_level"]),
            boxes=tuple(
                BoundingBox(
                    label=int(b["label"]) + 1,
                    left=int(b["left"]),
                    top=int(b["top"]),
                    right=int(b["right"]),
                    bottom=int(b["bottom"]),
                )
                for b in obj["boxes"]
            ),
            seeds=tuple(
                Seed(label=int(s["label"]) + 1, row=int(s["row"]), col=int(s["col"]))
                for s in obj["seeds"]
            ),
        )
    raise ValidationError(f"unknown annotation type {obj.get('type')!r}")


def _instance_out(inst: Instance) -> dict:
    grid = None
    if inst.pixel_grid is not None:
        grid = {
            "height": inst.pixel_grid.height,
            "width": inst.pixel_grid.width,
            "node_map": inst.pixel_grid.node_map.tolist(),
        }
    return {
        "id": inst.id,
        "nodes": {
            "features": inst.node_features.tolist(),
            "pixel_counts": inst.pixel_counts.tolist(),
        },
        "edges": {
            "pairs": inst.edges.tolist(),
            "features": inst.edge_features.tolist(),
        },
        "pixel_grid": grid,
        "annotation": _annotation_out(inst.annotation),
    }


def _instance_in(obj: dict, header: DatasetHeader) -> Instance:
    grid = None
    if obj.get("pixel_grid") is not None:
        g = obj["pixel_grid"]
        grid = PixelGrid(
            height=int(g["height"]),
            width=int(g["width"]),
            node_map=np.array(g["node_map"], np.int64),
        )
    feats = np.array(obj["nodes"]["features"], float).reshape(-1, header.d)
    n_edges = len(obj["edges"]["pairs"])
    inst = Instance(
        id=str(obj["id"]),
        node_features=feats,
        pixel_counts=np.array(obj["nodes"]["pixel_counts"], float),
        edges=np.array(obj["edges"]["pairs"], np.int64).reshape(-1, 2),
        edge_features=np.array(obj["edges"]["features"], float).reshape(n_edges, -1),
        label_space=LabelSpace(header.K),
        pixel_grid=grid,
        annotation=_annotation_in(obj.get("annotation")),
    )
    if inst.node_features.shape[1] != header.d:
        raise ValidationError(f"node feature dim != header d={header.d}")
    if n_edges and inst.edge_features.shape[1] != header.e:
        raise ValidationError(f"edge feature dim != header e={header.e}")
    if n_edges == 0:
        inst.edge_features = inst.edge_features.reshape(0, header.e)
    return inst


def save(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        header = {
            "format_version": dataset.header.format_version,
            "K": dataset.header.K,
            "d": dataset.header.d,
            "e": dataset.header.e,
            "label_names": dataset.header.label_names,
            "background_labels": dataset.header.background_labels,
            "other_label": dataset.header.other_label,
        }
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for inst in dataset.instances:
            fh.write(json.dumps(_instance_out(inst), separators=(",", ":")) + "\n")


def load(path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValidationError(f"{path}: empty file, header line missing")
    try:
        h = json.loads(lines[0])
        header = DatasetHeader(
            K=int(h["K"]),
            d=int(h["d"]),
            e=int(h["e"]),
            label_names=list(h["label_names"]),
            background_labels=[int(x) for x in h["background_labels"]],
            other_label=None if h["other_label"] is None else int(h["other_label"]),
            format_version=int(h["format_version"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: bad header line: {exc}") from exc
    if header.format_version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported format_version")
    instances = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            instances.append(_instance_in(json.loads(line), header))
        except (KeyError, TypeError, ValueError, ValidationError) as exc:
            raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
    return Dataset(header=header, instances=instances)


@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale stand-in for real segmentation data: horizontal background
    bands of "stuff" labels with "thing" rectangles painted on top."""

    grid: int = 6
    scale: int = 8
    n_stuff: int = 2
    n_things: int = 2
    noise: float = 0.4
    n_instances: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.grid < 2 or self.scale < 1 or self.n_instances < 1:
            raise ValidationError("grid >= 2, scale >= 1, n_instances >= 1")
        if self.n_stuff < 1 or self.n_things < 0:
            raise ValidationError("need at least one stuff label")

    @property
    def K(self) -> int:
        return self.n_stuff + self.n_things


def _thing_mask(h: int, w: int, variant: int) -> np.ndarray:
    """Connected non-rectangular shape filling an h x w extent tightly."""
    mask = np.ones((h, w), dtype=bool)
    if h < 2 or w < 2:
        return mask
    if variant == 0:  # corner knocked out (L shape)
        mask[0, w - 1] = False
    elif variant == 1:  # two opposite corners out (needs room to stay connected)
        mask[0, w - 1] = False
        if h + w >= 5:
            mask[h - 1, 0] = False
    else:  # plus-ish: all four corners out when big enough
        if h > 2 and w > 2:
            mask[0, 0] = mask[0, w - 1] = mask[h - 1, 0] = mask[h - 1, w - 1] = False
        else:
            mask[h - 1, w - 1] = False
    return mask


def _grid_edges(g: int) -> np.ndarray:
    edges = []
    for r in range(g):
        for c in range(g):
            i = g * r + c
            if c < g - 1:
                edges.append((i, i + 1))
            if r < g - 1:
                edges.append((i, i + g))
    return np.array(edges, np.int64)


def synth_generate(config: SynthConfig) -> Dataset:
    """Fully-labelled synthetic dataset, deterministic per seed.

    Node features are a one-hot label prototype plus Gaussian noise (d = K);
    edge features are [1, same-ground-truth-label] (e = 2), so a noise-free
    dataset is linearly separable by construction.
    """
    g, s, K = config.grid, config.scale, config.K
    V = g * g
    edges = _grid_edges(g)
    node_map = np.repeat(np.repeat(np.arange(V).reshape(g, g), s, 0), s, 1)
    grid = PixelGrid(g * s, g * s, node_map)
    eye = np.eye(K)
    instances = []
    for i in range(config.n_instances):
        rng = np.random.default_rng([config.seed, i])
        cells = np.empty((g, g), np.int64)
        # band count and labels vary per image so that image-level label sets
        # carry real information; the first band label cycles for coverage
        n_bands = int(rng.integers(1, min(config.n_stuff, 2) + 1))
        first = i % config.n_stuff + 1
        rest = [k for k in range(1, config.n_stuff + 1) if k != first]
        band_labels = [first] + [
            int(k) for k in rng.choice(rest, size=n_bands - 1, replace=False)
        ]
        bounds = np.sort(rng.choice(np.arange(1, g), size=n_bands - 1, replace=False))
        bounds = np.concatenate([[0], bounds, [g]])
        for j, k in enumerate(band_labels):
            cells[bounds[j] : bounds[j + 1], :] = k
        if config.n_things:
            # things cover areas comparable to the background bands so the
            # pixel-weighted losses cannot ignore them, and are not
            # rectangles, so their tight boxes contain background cells (as
            # real objects' boxes do); bounding extents never overlap, so
            # derived boxes of different labels do not contend
            occupied = np.zeros((g, g), dtype=bool)
            n_rect = int(rng.integers(1, 3))
            lo, hi = min(2, g - 2), min(3, g - 2)
            for j in range(n_rect):
                if j == 0:
                    k = config.n_stuff + 1 + i % config.n_things
                else:
                    k = config.n_stuff + 1 + int(rng.integers(config.n_things))
                for _attempt in range(8):
                    h = int(rng.integers(lo, hi + 1))
                    w = int(rng.integers(lo, hi + 1))
                    r0 = int(rng.integers(0, g - h + 1))
                    c0 = int(rng.integers(0, g - w + 1))
                    if occupied[r0 : r0 + h, c0 : c0 + w].any():
                        continue
                    shape = _thing_mask(h, w, int(rng.integers(3)))
                    cells[r0 : r0 + h, c0 : c0 + w][shape] = k
                    occupied[r0 : r0 + h, c0 : c0 + w] = True
                    break
        labels = cells.ravel()
        feats = eye[labels - 1] + config.noise * rng.normal(size=(V, K))
        same = (labels[edges[:, 0]] == labels[edges[:, 1]]).astype(float)
        efeats = np.stack([np.ones(len(edges)), same], axis=1)
        instances.append(
            Instance(
                id=f"synth-{config.seed}-{i:04d}",
                node_features=feats,
                pixel_counts=np.full(V, float(s * s)),
                edges=edges,
                edge_features=efeats,
                label_space=LabelSpace(K),
                pixel_grid=grid,
                annotation=FullLabelling(labels),
            )
        )
    header = DatasetHeader(
        K=K,
        d=K,
        e=2,
        background_labels=list(range(1, config.n_stuff + 1)),
    )
    return Dataset(header=header, instances=instances)


def derive_image_level(
    labelling: np.ndarray,
    pixel_counts: np.ndarray,
    other_label: Optional[int] = None,
    unlabelled_threshold: float = OTHER_RULE_UNLABELLED_FRACTION,
) -> frozenset[int]:
    """Unique labels present; adds the reserved "other" label for single-label
    images or images with too many unlabelled pixels."""
    y = np.asarray(labelling, np.int64)
    c = np.asarray(pixel_counts, float)
    present = set(np.unique(y[y != UNLABELLED]).tolist())
    unlabelled_fraction = float(c[y == UNLABELLED].sum()) / float(c.sum())
    if len(present) == 1 or unlabelled_fraction >= unlabelled_threshold:
        if other_label is None:
            raise ValidationError(
                "the 'other' rule fired but the dataset declares no other label"
            )
        present.add(other_label)
    return frozenset(present)


def _thing_components(labelling, grid: PixelGrid, thing_labels):
    cmap = np.asarray(labelling, np.int64)[grid.node_map]
    for k in sorted(set(thing_labels)):
        comp, n = ndimage.label(cmap == k, structure=FOUR_CONN)
        for ci in range(1, n + 1):
            yield k, comp == ci


def derive_boxes(
    labelling: np.ndarray, grid: PixelGrid, thing_labels: Sequence[int]
) -> tuple[BoundingBox, ...]:
    """Tight box per 4-connected component of each thing label."""
    out = []
    for k, mask in _thing_components(labelling, grid, thing_labels):
        rows, cols = np.nonzero(mask)
        out.append(
            BoundingBox(
                label=k,
                left=int(cols.min()),
                top=int(rows.min()),
                right=int(cols.max()),
                bottom=int(rows.max()),
            )
        )
    return tuple(out)


def pole_of_inaccessibility(mask: np.ndarray) -> tuple[int, int]:
    """Pixel of a component farthest (L2) from its complement; lexicographic
    (row, col) minimum on ties.  A mask covering the whole image degenerates
    to all-equal distances and thus (0, 0)."""
    mask = np.asarray(mask, bool)
    if mask.all():
        return (0, 0)
    dt = ndimage.distance_transform_edt(mask)
    best = np.argwhere(dt == dt.max())
    return (int(best[0][0]), int(best[0][1]))


def derive_seeds(
    labelling: np.ndarray, grid: PixelGrid, thing_labels: Sequence[int]
) -> tuple[Seed, ...]:
    """One seed per component: its pole of inaccessibility."""
    out = []
    for k, mask in _thing_components(labelling, grid, thing_labels):
        r, c = pole_of_inaccessibility(mask)
        out.append(Seed(label=k, row=r, col=c))
    return tuple(out)


def derive_weak_annotation(
    instance: Instance,
    header: DatasetHeader,
    use_boxes: bool = False,
    use_seeds: bool = False,
) -> WeakAnnotation:
    """Turn a fully-labelled instance into a weak annotation: thing labels
    become boxes and/or seeds, everything else stays image-level."""
    if not isinstance(instance.annotation, FullLabelling):
        raise ValidationError(f"instance {instance.id} is not fully labelled")
    labels = instance.annotation.labels
    z = derive_image_level(labels, instance.pixel_counts, header.other_label)
    boxes: tuple[BoundingBox, ...] = ()
    seeds: tuple[Seed, ...] = ()
    if use_boxes:
        boxes = derive_boxes(labels, instance.pixel_grid, header.thing_labels)
    if use_seeds:
        seeds = derive_seeds(labels, instance.pixel_grid, header.thing_labels)
    localized = {b.label for b in boxes} | {s.label for s in seeds}
    return WeakAnnotation(
        image_level=frozenset(z - localized), boxes=boxes, seeds=seeds
    )


def label_mass(instances: list[Instance], K: int) -> np.ndarray:
    """Per-label pixel mass over fully-labelled instances."""
    mass = np.zeros(K)
    for inst in instances:
        y = inst.annotation.labels
        for k in range(1, K + 1):
            mass[k - 1] += inst.pixel_counts[y == k].sum()
    return mass


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    sel = p > 0
    return float((p[sel] * np.log(p[sel] / q[sel])).sum())


def sample_subset(
    dataset: Dataset,
    target_size: int,
    seed: int,
    concentration: float = 200.0,
    n_steps: int = 2000,
) -> frozenset[str]:
    """Metropolis-Hastings over fixed-size subsets (swap proposals), with
    stationary density exp(-concentration * KL(subset labels || full labels)).

    Deterministic per seed; returns the selected instance ids.
    """
    insts = dataset.instances
    if not 0 < target_size <= len(insts):
        raise ValidationError("target size must be in 1..len(dataset)")
    if target_size == len(insts):
        return frozenset(inst.id for inst in insts)
    K = dataset.header.K
    per_inst = np.stack([label_mass([inst], K) for inst in insts])
    full = per_inst.sum(axis=0)
    full_p = full / full.sum()

    rng = np.random.default_rng(seed)
    members = list(range(target_size))
    outside = list(range(target_size, len(insts)))
    mass = per_inst[members].sum(axis=0)
    kl = _kl(mass / mass.sum(), full_p)
    for _ in range(n_steps):
        mi = int(rng.integers(len(members)))
        oi = int(rng.integers(len(outside)))
        new_mass = mass - per_inst[members[mi]] + per_inst[outside[oi]]
        new_kl = _kl(new_mass / new_mass.sum(), full_p)
        if np.log(rng.random()) < -concentration * (new_kl - kl):
            members[mi], outside[oi] = outside[oi], members[mi]
            mass, kl = new_mass, new_kl
    return frozenset(insts[i].id for i in members)


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    recall: float
    per_label_recall: dict[int, float]


def evaluate(
    predictions: list[np.ndarray],
    ground_truths: list[np.ndarray],
    pixel_counts: list[np.ndarray],
    excluded_labels: Sequence[int] = (),
    n_labels: Optional[int] = None,
) -> EvalResult:
    """Pixel accuracy and mean per-class recall, pooled over the whole set;
    unlabelled ground-truth nodes are skipped, excluded labels leave the
    recall mean."""
    if not predictions or len(predictions) != len(ground_truths):
        raise ValidationError("empty or misaligned evaluation set")
    if n_labels is None:
        n_labels = int(max(int(np.max(g)) for g in ground_truths))
    correct = np.zeros(n_labels)
    area = np.zeros(n_labels)
    for pred, gt, c in zip(predictions, ground_truths, pixel_counts):
        pred = np.asarray(pred, np.int64)
        gt = np.asarray(gt, np.int64)
        c = np.asarray(c, float)
        for k in range(1, n_labels + 1):
            sel = gt == k
            area[k - 1] += c[sel].sum()
            correct[k - 1] += c[sel & (pred == gt)].sum()
    total_area = area.sum()
    if total_area == 0:
        raise ValidationError("no labelled ground-truth pixels to evaluate")
    accuracy = float(correct.sum() / total_area)
    per_label = {
        k: float(correct[k - 1] / area[k - 1])
        for k in range(1, n_labels + 1)
        if area[k - 1] > 0
    }
    included = [v for k, v in per_label.items() if k not in set(excluded_labels)]
    recall = float(np.mean(included)) if included else math.nan
    return EvalResult(accuracy=accuracy, recall=recall, per_label_recall=per_label)


def estimate_label_areas(instances: list[Instance], K: int) -> dict[int, float]:
    """Mean pixel area of each label over the fully-labelled instances where
    it appears; feeds LossConfig.area_estimates."""
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for inst in instances:
        if not isinstance(inst.annotation, FullLabelling):
            continue
        y = inst.annotation.labels
        for k in np.unique(y[y != UNLABELLED]):
            k = int(k)
            sums[k] = sums.get(k, 0.0) + float(inst.pixel_counts[y == k].sum())
            counts[k] = counts.get(k, 0) + 1
    return {k: sums[k] / counts[k] for k in sums}
