"""Loop-only GE2E reference used by the tests.  Shares no code with the package."""

import math

EPS = 1e-12


def _norm(v):
    return math.sqrt(sum(x * x for x in v))


def _cos(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / ((_norm(a) + EPS) * (_norm(b) + EPS))


def brute_similarity(rows, g, w, b):
    """rows: list of g*u lists.  Returns nested list S[ij][k]."""
    u = len(rows) // g
    d = len(rows[0])
    out = []
    for i in range(g):
        for j in range(u):
            e = rows[i * u + j]
            line = []
            for k in range(g):
                if k == i:
                    c = [0.0] * d
                    for m in range(u):
                        if m != j:
                            for t in range(d):
                                c[t] += rows[k * u + m][t]
                    c = [x / (u - 1) for x in c]
                else:
                    c = [0.0] * d
                    for m in range(u):
                        for t in range(d):
                            c[t] += rows[k * u + m][t]
                    c = [x / u for x in c]
                line.append(w * _cos(e, c) + b)
            out.append(line)
    return out


def brute_loss(rows, g, w, b):
    u = len(rows) // g
    s = brute_similarity(rows, g, w, b)
    total = 0.0
    for r, line in enumerate(s):
        i = r // u
        denom = sum(math.exp(v) for v in line)
        total += -math.log(math.exp(line[i]) / denom)
    return total
