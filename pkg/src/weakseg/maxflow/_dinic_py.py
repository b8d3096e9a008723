"""Pure-Python Dinic kernel; the traversal order mirrors the Cython kernel
exactly so both backends produce bit-identical flows and cuts."""

from __future__ import annotations

INF = float("inf")


def solve(n, s, t, head, cap, adj_start, adj_arc, level, q, it, pathbuf, reach):
    head = head.tolist()
    caps = cap.tolist()
    adj_start = adj_start.tolist()
    adj_arc = adj_arc.tolist()
    level = [0] * n
    q = [0] * n
    it = [0] * n
    total = 0.0

    while True:
        for i in range(n):
            level[i] = -1
        level[s] = 0
        q[0] = s
        qh, qt = 0, 1
        while qh < qt:
            v = q[qh]
            qh += 1
            for idx in range(adj_start[v], adj_start[v + 1]):
                a = adj_arc[idx]
                w = head[a]
                if caps[a] > 0.0 and level[w] < 0:
                    level[w] = level[v] + 1
                    q[qt] = w
                    qt += 1
        if level[t] < 0:
            break

        for i in range(n):
            it[i] = adj_start[i]
        path = []
        v = s
        while True:
            if v == t:
                f = INF
                for a in path:
                    if caps[a] < f:
                        f = caps[a]
                for a in path:
                    caps[a] -= f
                    caps[a ^ 1] += f
                total += f
                cut_at = 0
                while cut_at < len(path) and caps[path[cut_at]] > 0.0:
                    cut_at += 1
                del path[cut_at:]
                v = s if not path else head[path[-1]]
            else:
                advanced = False
                while it[v] < adj_start[v + 1]:
                    a = adj_arc[it[v]]
                    w = head[a]
                    if caps[a] > 0.0 and level[w] == level[v] + 1:
                        path.append(a)
                        v = w
                        advanced = True
                        break
                    it[v] += 1
                if not advanced:
                    level[v] = -1
                    if v == s:
                        break
                    a = path.pop()
                    v = head[a ^ 1]
                    it[v] += 1

    for i in range(n):
        reach[i] = 0
    reach[s] = 1
    q[0] = s
    qh, qt = 0, 1
    while qh < qt:
        v = q[qh]
        qh += 1
        for idx in range(adj_start[v], adj_start[v + 1]):
            a = adj_arc[idx]
            w = head[a]
            if caps[a] > 0.0 and not reach[w]:
                reach[w] = 1
                q[qt] = w
                qt += 1
    return total
