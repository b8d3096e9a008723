"""Bounding-box geometry: margins, insider superpixels, row/column cliques.

A superpixel is an *insider* of a box iff its pixel set intersects the box
shrunk by a 6% margin per dimension (margins rounded down, so small boxes do
not shrink at all).  Insiders are the nodes a box's label may occupy; border
crossers outside the shrunk extent are treated as outsiders.
"""

from __future__ import annotations

import numpy as np

from .core import BoundingBox, Instance, WeakAnnotation

MARGIN = 0.06


def shrunk_extent(box: BoundingBox) -> tuple[int, int, int, int]:
    """(left, top, right, bottom) after shrinking each dimension by the margin."""
    mw = int(MARGIN * box.width)
    mh = int(MARGIN * box.height)
    return box.left + mw, box.top + mh, box.right - mw, box.bottom - mh


def insider_nodes(instance: Instance, box: BoundingBox) -> np.ndarray:
    """Sorted ids of superpixels whose pixels intersect the shrunk box."""
    l, t, r, b = shrunk_extent(box)
    sub = instance.pixel_grid.node_map[t : b + 1, l : r + 1]
    return np.unique(sub)


def row_col_cliques(
    instance: Instance, box: BoundingBox
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-row and per-column node cliques of a box, restricted to insiders.

    Rows and columns span the full (unshrunk) box; a clique holds the insider
    superpixels whose pixels intersect that row/column segment inside the box.
    """
    nm = instance.pixel_grid.node_map
    inside = insider_nodes(instance, box)
    mask = np.zeros(instance.n_nodes, dtype=bool)
    mask[inside] = True
    rows = []
    for p in range(box.top, box.bottom + 1):
        ids = np.unique(nm[p, box.left : box.right + 1])
        rows.append(ids[mask[ids]])
    cols = []
    for q in range(box.left, box.right + 1):
        ids = np.unique(nm[box.top : box.bottom + 1, q])
        cols.append(ids[mask[ids]])
    return rows, cols


def classification_map(instance: Instance, labelling: np.ndarray) -> np.ndarray:
    """Per-pixel label map induced by a superpixel labelling."""
    y = np.asarray(labelling, dtype=np.int64)
    return y[instance.pixel_grid.node_map]


def touches_all_sides(
    instance: Instance, box: BoundingBox, labelling: np.ndarray
) -> bool:
    """Whether the label's classification map touches all four shrunk sides."""
    l, t, r, b = shrunk_extent(box)
    cmap = classification_map(instance, labelling)
    k = box.label
    return bool(
        (cmap[t, l : r + 1] == k).any()
        and (cmap[b, l : r + 1] == k).any()
        and (cmap[t : b + 1, l] == k).any()
        and (cmap[t : b + 1, r] == k).any()
    )


def box_tightness_ok(
    annotation: WeakAnnotation, instance: Instance, labelling: np.ndarray
) -> bool:
    """The tightness clauses alone: every box touched on all four shrunk sides."""
    return all(touches_all_sides(instance, b, labelling) for b in annotation.boxes)


def box_labels_confined(
    annotation: WeakAnnotation, instance: Instance, labelling: np.ndarray
) -> bool:
    """No box label appears on a node outside the insiders of its own boxes."""
    y = np.asarray(labelling, dtype=np.int64)
    for k in annotation.box_labels:
        allowed = np.zeros(instance.n_nodes, dtype=bool)
        for b in annotation.boxes:
            if b.label == k:
                allowed[insider_nodes(instance, b)] = True
        if np.any((y == k) & ~allowed):
            return False
    return True


def insider_sets_by_label(
    annotation: WeakAnnotation, instance: Instance
) -> dict[int, np.ndarray]:
    """Label -> sorted union of insider nodes over that label's boxes (V_k)."""
    out: dict[int, np.ndarray] = {}
    for k in sorted(annotation.box_labels):
        nodes = [insider_nodes(instance, b) for b in annotation.boxes if b.label == k]
        out[k] = np.unique(np.concatenate(nodes))
    return out
