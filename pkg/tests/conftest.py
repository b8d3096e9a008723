import numpy as np
import pytest

from weakseg.core import Instance, LabelSpace, PixelGrid


def grid_edges(g):
    edges = []
    for r in range(g):
        for c in range(g):
            i = g * r + c
            if c < g - 1:
                edges.append((i, i + 1))
            if r < g - 1:
                edges.append((i, i + g))
    return np.array(edges, np.int64)


def block_grid(g, scale):
    """PixelGrid where node (r, c) owns a scale x scale pixel block."""
    nm = np.repeat(np.repeat(np.arange(g * g).reshape(g, g), scale, 0), scale, 1)
    return PixelGrid(g * scale, g * scale, nm)


def make_instance(
    g=4,
    scale=2,
    K=4,
    d=3,
    e=2,
    seed=0,
    annotation=None,
    with_grid=True,
):
    rng = np.random.default_rng(seed)
    V = g * g
    edges = grid_edges(g)
    return Instance(
        id=f"fixture-{seed}",
        node_features=rng.normal(0, 1, (V, d)),
        pixel_counts=np.full(V, float(scale * scale)),
        edges=edges,
        edge_features=rng.uniform(0, 1, (len(edges), e)),
        label_space=LabelSpace(K),
        pixel_grid=block_grid(g, scale) if with_grid else None,
        annotation=annotation,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
