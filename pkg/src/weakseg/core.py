"""Domain types: instances, annotations, labellings, models, and the linear score.

Labels are 1-based integers 1..K.  In full labellings, 0 marks a node whose
ground truth is unknown ("unlabelled"); such nodes contribute nothing to any
loss or metric.  All types are treated as immutable after construction and are
safe to share read-only across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ValidationError

UNLABELLED = 0


@dataclass(frozen=True)
class LabelSpace:
    """The set of labels {1, ..., K}."""

    K: int

    def __post_init__(self):
        if self.K < 2:
            raise ValidationError(f"label space needs K >= 2, got {self.K}")

    @property
    def labels(self) -> range:
        return range(1, self.K + 1)


@dataclass(frozen=True)
class Node:
    id: int
    features: np.ndarray
    pixel_count: float

    def __post_init__(self):
        if self.pixel_count <= 0:
            raise ValidationError(f"node {self.id}: pixel_count must be > 0")


@dataclass(frozen=True)
class Edge:
    """Undirected edge (u < v) with nonnegative interaction features."""

    u: int
    v: int
    features: np.ndarray

    def __post_init__(self):
        if self.u >= self.v:
            raise ValidationError(f"edge ({self.u},{self.v}): need u < v")
        if np.any(np.asarray(self.features) < 0):
            raise ValidationError(f"edge ({self.u},{self.v}): features must be >= 0")


@dataclass(frozen=True)
class PixelGrid:
    """Pixel geometry: node_map[r, c] is the node id owning pixel (r, c)."""

    height: int
    width: int
    node_map: np.ndarray

    def __post_init__(self):
        nm = np.asarray(self.node_map)
        if nm.shape != (self.height, self.width):
            raise ValidationError(
                f"node_map shape {nm.shape} != ({self.height}, {self.width})"
            )

    def pixel_counts(self, n_nodes: int) -> np.ndarray:
        return np.bincount(self.node_map.ravel(), minlength=n_nodes).astype(float)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in inclusive pixel coordinates; width = right-left+1."""

    label: int
    left: int
    top: int
    right: int
    bottom: int

    def __post_init__(self):
        if self.left > self.right or self.top > self.bottom:
            raise ValidationError(f"degenerate box {self}")

    @property
    def width(self) -> int:
        return self.right - self.left + 1

    @property
    def height(self) -> int:
        return self.bottom - self.top + 1


@dataclass(frozen=True)
class Seed:
    """A single labelled pixel, assumed close to the object's centre."""

    label: int
    row: int
    col: int


@dataclass(frozen=True)
class FullLabelling:
    """Ground-truth per-node labels; 0 marks an unlabelled node."""

    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "labels", np.ascontiguousarray(self.labels, dtype=np.int64)
        )

    @property
    def labelled_mask(self) -> np.ndarray:
        return self.labels != UNLABELLED


@dataclass(frozen=True)
class WeakAnnotation:
    """Image-level label set, plus optional bounding boxes and object seeds.

    Box and seed labels are disjoint from the image-level set: a category is
    described either by where it is (boxes/seeds) or merely by its presence.
    """

    image_level: frozenset[int] = frozenset()
    boxes: tuple[BoundingBox, ...] = ()
    seeds: tuple[Seed, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "image_level", frozenset(self.image_level))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if not (self.image_level or self.boxes or self.seeds):
            raise ValidationError("weak annotation is empty")
        overlap = self.image_level & self.box_labels
        if overlap:
            raise ValidationError(
                f"labels {sorted(overlap)} appear both image-level and as boxes"
            )
        if self.image_level & self.seed_labels:
            raise ValidationError("seed labels must not repeat in image_level")

    @property
    def box_labels(self) -> frozenset[int]:
        return frozenset(b.label for b in self.boxes)

    @property
    def seed_labels(self) -> frozenset[int]:
        return frozenset(s.label for s in self.seeds)

    @property
    def all_labels(self) -> frozenset[int]:
        return self.image_level | self.box_labels | self.seed_labels


Annotation = Union[FullLabelling, WeakAnnotation]


@dataclass
class Instance:
    """A superpixel graph with features, optional pixel geometry and annotation.

    node_features: (V, d) float array; pixel_counts: (V,) positive floats.
    edges: (E, 2) int array with u < v per row; edge_features: (E, e) >= 0.
    """

    id: str
    node_features: np.ndarray
    pixel_counts: np.ndarray
    edges: np.ndarray
    edge_features: np.ndarray
    label_space: LabelSpace
    pixel_grid: Optional[PixelGrid] = None
    annotation: Optional[Annotation] = None
    _node_pixels: Optional[list] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.node_features = np.ascontiguousarray(self.node_features, dtype=float)
        self.pixel_counts = np.ascontiguousarray(self.pixel_counts, dtype=float)
        self.edges = np.ascontiguousarray(self.edges, dtype=np.int64).reshape(-1, 2)
        ef = np.ascontiguousarray(self.edge_features, dtype=float)
        if ef.ndim != 2:
            width = ef.shape[-1] if ef.size else 0
            ef = ef.reshape(len(self.edges), width)
        self.edge_features = ef
        self._validate()

    def _validate(self):
        V = self.n_nodes
        if self.pixel_counts.shape != (V,):
            raise ValidationError(f"instance {self.id}: pixel_counts shape mismatch")
        if np.any(self.pixel_counts <= 0):
            raise ValidationError(f"instance {self.id}: pixel counts must be > 0")
        if len(self.edges):
            if self.edges.min() < 0 or self.edges.max() >= V:
                raise ValidationError(f"instance {self.id}: edge endpoint out of range")
            if np.any(self.edges[:, 0] >= self.edges[:, 1]):
                raise ValidationError(f"instance {self.id}: edges must have u < v")
            pairs = set(map(tuple, self.edges))
            if len(pairs) != len(self.edges):
                raise ValidationError(f"instance {self.id}: duplicate edges")
        if self.edge_features.shape[0] != len(self.edges):
            raise ValidationError(f"instance {self.id}: edge feature count mismatch")
        if np.any(self.edge_features < 0):
            raise ValidationError(f"instance {self.id}: edge features must be >= 0")
        if self.pixel_grid is not None:
            nm = self.pixel_grid.node_map
            if nm.min() < 0 or nm.max() >= V:
                raise ValidationError(f"instance {self.id}: node_map id out of range")
            counts = self.pixel_grid.pixel_counts(V)
            if not np.array_equal(counts, self.pixel_counts):
                raise ValidationError(
                    f"instance {self.id}: pixel_counts disagree with node_map"
                )
        if self.annotation is not None:
            self._validate_annotation()

    def _validate_annotation(self):
        K = self.label_space.K
        ann = self.annotation
        if isinstance(ann, FullLabelling):
            if len(ann.labels) != self.n_nodes:
                raise ValidationError(f"instance {self.id}: labelling length mismatch")
            if ann.labels.min() < 0 or ann.labels.max() > K:
                raise ValidationError(f"instance {self.id}: label out of 1..{K}")
        else:
            if any(l < 1 or l > K for l in ann.all_labels):
                raise ValidationError(f"instance {self.id}: label out of 1..{K}")
            if (ann.boxes or ann.seeds) and self.pixel_grid is None:
                raise ValidationError(
                    f"instance {self.id}: boxes/seeds require a pixel grid"
                )
            for b in ann.boxes:
                if not (
                    0 <= b.left
                    and b.right < self.pixel_grid.width
                    and 0 <= b.top
                    and b.bottom < self.pixel_grid.height
                ):
                    raise ValidationError(f"instance {self.id}: box outside grid")
            for s in ann.seeds:
                if not (
                    0 <= s.row < self.pixel_grid.height
                    and 0 <= s.col < self.pixel_grid.width
                ):
                    raise ValidationError(f"instance {self.id}: seed outside grid")

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def total_pixels(self) -> float:
        return float(self.pixel_counts.sum())

    def node_pixels(self, i: int) -> np.ndarray:
        """(m, 2) array of (row, col) pixels owned by node i (grid required)."""
        if self._node_pixels is None:
            nm = self.pixel_grid.node_map
            order = np.argsort(nm.ravel(), kind="stable")
            coords = np.stack(np.unravel_index(order, nm.shape), axis=1)
            bounds = np.searchsorted(nm.ravel()[order], np.arange(self.n_nodes + 1))
            self._node_pixels = [
                coords[bounds[k] : bounds[k + 1]] for k in range(self.n_nodes)
            ]
        return self._node_pixels[i]

    @classmethod
    def from_parts(
        cls,
        id: str,
        nodes: list[Node],
        edges: list[Edge],
        label_space: LabelSpace,
        pixel_grid: Optional[PixelGrid] = None,
        annotation: Optional[Annotation] = None,
    ) -> "Instance":
        nodes = sorted(nodes, key=lambda n: n.id)
        if [n.id for n in nodes] != list(range(len(nodes))):
            raise ValidationError("node ids must be 0..V-1")
        dims = {len(np.atleast_1d(n.features)) for n in nodes}
        if len(dims) > 1:
            raise ValidationError("all nodes must share one feature length")
        if edges:
            edge_feats = np.array([np.atleast_1d(e.features) for e in edges], float)
        else:
            edge_feats = np.zeros((0, 0))
        return cls(
            id=id,
            node_features=np.array([np.atleast_1d(n.features) for n in nodes], float),
            pixel_counts=np.array([n.pixel_count for n in nodes], float),
            edges=np.array([(e.u, e.v) for e in edges], np.int64).reshape(-1, 2),
            edge_features=edge_feats,
            label_space=label_space,
            pixel_grid=pixel_grid,
            annotation=annotation,
        )


@dataclass
class Model:
    """Weight vector: K per-label unary blocks plus one nonnegative pairwise block."""

    unary: np.ndarray  # (K, d)
    pairwise: np.ndarray  # (e,), all entries >= 0

    def __post_init__(self):
        self.unary = np.ascontiguousarray(self.unary, dtype=float)
        self.pairwise = np.ascontiguousarray(self.pairwise, dtype=float)
        if self.unary.ndim != 2:
            raise ValidationError("unary weights must be a (K, d) matrix")
        if np.any(self.pairwise < 0):
            raise ValidationError("pairwise weights must be >= 0 (associativity)")

    @property
    def K(self) -> int:
        return self.unary.shape[0]

    @property
    def d(self) -> int:
        return self.unary.shape[1]

    @property
    def e(self) -> int:
        return self.pairwise.shape[0]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.unary.ravel(), self.pairwise])

    @classmethod
    def from_vector(cls, w: np.ndarray, K: int, d: int, e: int) -> "Model":
        w = np.asarray(w, float)
        if w.shape != (K * d + e,):
            raise ValidationError(f"weight vector has wrong length {w.shape}")
        return cls(unary=w[: K * d].reshape(K, d).copy(), pairwise=w[K * d :].copy())

    @classmethod
    def zeros(cls, K: int, d: int, e: int) -> "Model":
        return cls(unary=np.zeros((K, d)), pairwise=np.zeros(e))


def unary_scores(model: Model, instance: Instance) -> np.ndarray:
    """(V, K) table of per-node, per-label linear scores x_i . w_k."""
    return instance.node_features @ model.unary.T


def edge_rewards(model: Model, instance: Instance) -> np.ndarray:
    """(E,) equal-label rewards x_ij . w_p (nonnegative by construction)."""
    if instance.n_edges == 0:
        return np.zeros(0)
    return instance.edge_features @ model.pairwise


def score(model: Model, instance: Instance, labelling: np.ndarray) -> float:
    """Linear score of a labelling: unary terms plus equal-label edge rewards."""
    y = _check_labelling(instance, labelling)
    if model.d != instance.node_features.shape[1] or (
        instance.n_edges and model.e != instance.edge_features.shape[1]
    ):
        raise ValidationError("model/instance feature dimension mismatch")
    u = unary_scores(model, instance)
    total = float(u[np.arange(instance.n_nodes), y - 1].sum())
    if instance.n_edges:
        same = y[instance.edges[:, 0]] == y[instance.edges[:, 1]]
        total += float(edge_rewards(model, instance)[same].sum())
    return total


def generalized_features(instance: Instance, labelling: np.ndarray) -> np.ndarray:
    """Feature map with score(model, x, y) == model.to_vector() . psi exactly."""
    y = _check_labelling(instance, labelling)
    K = instance.label_space.K
    d = instance.node_features.shape[1]
    e = instance.edge_features.shape[1]
    psi = np.zeros(K * d + e)
    for k in range(1, K + 1):
        sel = y == k
        if sel.any():
            psi[(k - 1) * d : k * d] = instance.node_features[sel].sum(axis=0)
    if instance.n_edges:
        same = y[instance.edges[:, 0]] == y[instance.edges[:, 1]]
        if same.any():
            psi[K * d :] = instance.edge_features[same].sum(axis=0)
    return psi


def consistent_set_membership(
    annotation: WeakAnnotation, instance: Instance, labelling: np.ndarray
) -> bool:
    """Whether a full labelling is consistent with a weak annotation.

    Requires: only annotation labels used; every annotation label present;
    seeds honoured; box labels confined to their boxes and tight within the
    6%-shrunk extent (all four sides touched on the classification map).
    """
    from . import boxes as _boxes

    y = _check_labelling(instance, labelling)
    used = set(np.unique(y).tolist())
    if not used <= set(annotation.all_labels):
        return False
    if not set(annotation.all_labels) <= used:
        return False
    for s in annotation.seeds:
        if y[instance.pixel_grid.node_map[s.row, s.col]] != s.label:
            return False
    if annotation.boxes:
        if not _boxes.box_labels_confined(annotation, instance, y):
            return False
        if not _boxes.box_tightness_ok(annotation, instance, y):
            return False
    return True


def _check_labelling(instance: Instance, labelling: np.ndarray) -> np.ndarray:
    y = np.asarray(labelling, dtype=np.int64).ravel()
    if len(y) != instance.n_nodes:
        raise ValidationError(
            f"labelling length {len(y)} != node count {instance.n_nodes}"
        )
    if len(y) and (y.min() < 1 or y.max() > instance.label_space.K):
        raise ValidationError("labelling uses labels outside 1..K")
    return y
