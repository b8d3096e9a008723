"""Max-flow/min-cut on directed capacitated graphs.

The solver is Dinic's algorithm with the current-arc optimisation.  Two
interchangeable kernels exist: a Cython extension (built at install time) and
a pure-Python twin with identical traversal order, so both produce identical
flow values and identical canonical cuts.  The compiled kernel is selected at
import when available; set WEAKSEG_MAXFLOW=pure|compiled to force one.

The returned cut is canonical: the source side is the set of nodes reachable
from the source in the residual graph of the maximum flow, which is the same
for every maximum flow.
"""

from __future__ import annotations

import math
import os

import numpy as np

from ..errors import ValidationError

_requested = os.environ.get("WEAKSEG_MAXFLOW", "").strip().lower()
if _requested == "pure":
    from . import _dinic_py as _kernel

    BACKEND = "pure"
elif _requested == "compiled":
    from . import _dinic_c as _kernel  # type: ignore[attr-defined]

    BACKEND = "compiled"
else:
    try:
        from . import _dinic_c as _kernel  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        from . import _dinic_py as _kernel

        BACKEND = "pure"


class FlowNetwork:
    """Directed graph with paired forward/reverse arcs and float capacities."""

    def __init__(self, n_nodes: int, source: int, sink: int):
        if n_nodes < 2 or not (0 <= source < n_nodes and 0 <= sink < n_nodes):
            raise ValidationError("bad node count or terminal ids")
        if source == sink:
            raise ValidationError("source and sink must differ")
        self.n_nodes = n_nodes
        self.source = source
        self.sink = sink
        self._tails: list[int] = []
        self._heads: list[int] = []
        self._caps: list[float] = []

    def add_arc(self, u: int, v: int, capacity: float, rev_capacity: float = 0.0):
        """Add arc u->v and its paired reverse arc v->u."""
        if not (0 <= u < self.n_nodes and 0 <= v < self.n_nodes) or u == v:
            raise ValidationError(f"bad arc ({u}, {v})")
        if not (
            math.isfinite(capacity)
            and capacity >= 0
            and math.isfinite(rev_capacity)
            and rev_capacity >= 0
        ):
            raise ValidationError(f"capacities must be finite and >= 0 on ({u}, {v})")
        self._tails += [u, v]
        self._heads += [v, u]
        self._caps += [float(capacity), float(rev_capacity)]

    def add_arcs(self, tails, heads, caps):
        """Bulk add_arc: arrays of forward arcs (reverse capacities zero)."""
        tails = np.asarray(tails, np.int64)
        heads = np.asarray(heads, np.int64)
        caps = np.asarray(caps, np.float64)
        if (
            tails.min(initial=0) < 0
            or heads.min(initial=0) < 0
            or (len(tails) and max(tails.max(), heads.max()) >= self.n_nodes)
            or np.any(tails == heads)
        ):
            raise ValidationError("bad arc endpoints")
        if np.any(~np.isfinite(caps)) or np.any(caps < 0):
            raise ValidationError("capacities must be finite and >= 0")
        pair_tails = np.empty(2 * len(tails), np.int64)
        pair_tails[0::2] = tails
        pair_tails[1::2] = heads
        pair_heads = np.empty_like(pair_tails)
        pair_heads[0::2] = heads
        pair_heads[1::2] = tails
        pair_caps = np.zeros(2 * len(tails), np.float64)
        pair_caps[0::2] = caps
        self._tails += pair_tails.tolist()
        self._heads += pair_heads.tolist()
        self._caps += pair_caps.tolist()

    @property
    def n_arcs(self) -> int:
        return len(self._caps)

    def solve(self) -> tuple[float, np.ndarray]:
        """Run max-flow; return (value, boolean source-side mask)."""
        n = self.n_nodes
        tails = np.asarray(self._tails, np.int64)
        head = np.asarray(self._heads, np.int64)
        cap = np.asarray(self._caps, np.float64)
        order = np.argsort(tails, kind="stable")
        adj_arc = order.astype(np.int64)
        adj_start = np.searchsorted(tails[order], np.arange(n + 1)).astype(np.int64)
        reach = np.zeros(n, np.uint8)
        value = _kernel.solve(
            n,
            self.source,
            self.sink,
            head,
            cap.copy(),
            adj_start,
            adj_arc,
            np.empty(n, np.int64),
            np.empty(n, np.int64),
            np.empty(n, np.int64),
            np.empty(n + 1, np.int64),
            reach,
        )
        return float(value), reach.astype(bool)


def max_flow(network: FlowNetwork) -> tuple[float, frozenset[int]]:
    """Maximum flow value and the canonical minimum-cut source side."""
    value, mask = network.solve()
    return value, frozenset(np.flatnonzero(mask).tolist())
