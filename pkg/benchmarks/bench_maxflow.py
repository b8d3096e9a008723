#!/usr/bin/env python3
"""Benchmark the compiled vs pure-Python max-flow kernels.

The graphs mirror what alpha-expansion builds: a grid of pixel nodes with
source/sink unary arcs plus neighbour arcs. Run:

    python benchmarks/bench_maxflow.py [--sizes 10,20,40] [--repeats 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from weakseg.maxflow import FlowNetwork, _dinic_py

try:
    from weakseg.maxflow import _dinic_c
except ImportError:
    _dinic_c = None


def expansion_style_network(side: int, seed: int) -> FlowNetwork:
    rng = np.random.default_rng(seed)
    n = side * side + 2
    s, t = 0, 1
    net = FlowNetwork(n, s, t)
    for i in range(side * side):
        gid = 2 + i
        u = rng.uniform(0, 4)
        if rng.random() < 0.5:
            net.add_arc(s, gid, u)
        else:
            net.add_arc(gid, t, u)
    for r in range(side):
        for c in range(side):
            i = 2 + side * r + c
            if c < side - 1:
                net.add_arc(i, i + 1, rng.uniform(0, 2), rng.uniform(0, 2))
            if r < side - 1:
                net.add_arc(i, i + side, rng.uniform(0, 2), rng.uniform(0, 2))
    return net


def run_kernel(kernel, net: FlowNetwork):
    n = net.n_nodes
    tails = np.asarray(net._tails, np.int64)
    head = np.asarray(net._heads, np.int64)
    cap = np.asarray(net._caps, np.float64)
    order = np.argsort(tails, kind="stable").astype(np.int64)
    adj_start = np.searchsorted(tails[order], np.arange(n + 1)).astype(np.int64)
    reach = np.zeros(n, np.uint8)
    t0 = time.perf_counter()
    value = kernel.solve(
        n, net.source, net.sink, head, cap.copy(), adj_start, order,
        np.empty(n, np.int64), np.empty(n, np.int64), np.empty(n, np.int64),
        np.empty(n + 1, np.int64), reach,
    )
    return time.perf_counter() - t0, value


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="10,20,40,80")
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    sizes = [int(tok) for tok in args.sizes.split(",")]

    kernels = [("pure", _dinic_py)]
    if _dinic_c is not None:
        kernels.insert(0, ("compiled", _dinic_c))
    else:
        print("compiled kernel not built; benchmarking pure only")

    print(f"{'side':>6} {'nodes':>8} {'arcs':>9}", end="")
    for name, _ in kernels:
        print(f" {name + ' (ms)':>15}", end="")
    if len(kernels) == 2:
        print(f" {'speedup':>9}", end="")
    print()
    for side in sizes:
        times = {}
        for name, kernel in kernels:
            best = np.inf
            for rep in range(args.repeats):
                net = expansion_style_network(side, seed=rep)
                dt, value = run_kernel(kernel, net)
                best = min(best, dt)
            times[name] = best
        net = expansion_style_network(side, seed=0)
        vals = [run_kernel(k, net)[1] for _, k in kernels]
        assert all(v == vals[0] for v in vals), "kernels disagree!"
        print(f"{side:>6} {side * side + 2:>8} {net.n_arcs:>9}", end="")
        for name, _ in kernels:
            print(f" {times[name] * 1e3:>15.3f}", end="")
        if len(kernels) == 2:
            print(f" {times['pure'] / times['compiled']:>8.1f}x", end="")
        print()


if __name__ == "__main__":
    main()
