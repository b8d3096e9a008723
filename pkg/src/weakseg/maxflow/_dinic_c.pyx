# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython Dinic kernel; keep in lockstep with _dinic_py.solve."""


def solve(long long n, long long s, long long t,
          long long[::1] head, double[::1] cap,
          long long[::1] adj_start, long long[::1] adj_arc,
          long long[::1] level, long long[::1] q, long long[::1] it,
          long long[::1] pathbuf, unsigned char[::1] reach):
    cdef double total = 0.0
    cdef double f
    cdef long long i, v, w, a, idx, qh, qt, depth, cut_at

    while True:
        for i in range(n):
            level[i] = -1
        level[s] = 0
        q[0] = s
        qh = 0
        qt = 1
        while qh < qt:
            v = q[qh]
            qh += 1
            for idx in range(adj_start[v], adj_start[v + 1]):
                a = adj_arc[idx]
                w = head[a]
                if cap[a] > 0.0 and level[w] < 0:
                    level[w] = level[v] + 1
                    q[qt] = w
                    qt += 1
        if level[t] < 0:
            break

        for i in range(n):
            it[i] = adj_start[i]
        depth = 0
        v = s
        while True:
            if v == t:
                f = cap[pathbuf[0]]
                for i in range(1, depth):
                    if cap[pathbuf[i]] < f:
                        f = cap[pathbuf[i]]
                for i in range(depth):
                    a = pathbuf[i]
                    cap[a] -= f
                    cap[a ^ 1] += f
                total += f
                cut_at = 0
                while cut_at < depth and cap[pathbuf[cut_at]] > 0.0:
                    cut_at += 1
                depth = cut_at
                v = s if depth == 0 else head[pathbuf[depth - 1]]
            else:
                w = -1
                while it[v] < adj_start[v + 1]:
                    a = adj_arc[it[v]]
                    w = head[a]
                    if cap[a] > 0.0 and level[w] == level[v] + 1:
                        pathbuf[depth] = a
                        depth += 1
                        v = w
                        break
                    it[v] += 1
                    w = -1
                if w < 0:
                    level[v] = -1
                    if v == s:
                        break
                    depth -= 1
                    a = pathbuf[depth]
                    v = head[a ^ 1]
                    it[v] += 1

    for i in range(n):
        reach[i] = 0
    reach[s] = 1
    q[0] = s
    qh = 0
    qt = 1
    while qh < qt:
        v = q[qh]
        qh += 1
        for idx in range(adj_start[v], adj_start[v + 1]):
            a = adj_arc[idx]
            w = head[a]
            if cap[a] > 0.0 and reach[w] == 0:
                reach[w] = 1
                q[qt] = w
                qt += 1
    return total
