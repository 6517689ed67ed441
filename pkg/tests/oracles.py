"""Exhaustive pure-Python reference implementations.

Written independently of the package: plain loops over points, no numpy
reductions, ties resolved by explicit comparison of (distance, index).
"""
from __future__ import annotations

import math


def sq_dist(a, b) -> float:
    return sum((float(x) - float(y)) ** 2 for x, y in zip(a, b))


def directed_min_sq(p, q) -> list[float]:
    return [min(sq_dist(a, b) for b in q) for a in p]


def chamfer_l1(p, q) -> float:
    a = directed_min_sq(p, q)
    b = directed_min_sq(q, p)
    return math.fsum(math.sqrt(d) for d in a) / len(a) + math.fsum(math.sqrt(d) for d in b) / len(b)


def chamfer_l2(p, q) -> float:
    a = directed_min_sq(p, q)
    b = directed_min_sq(q, p)
    return math.fsum(a) / len(a) + math.fsum(b) / len(b)


def f_score(p, q, tau: float) -> float:
    precision = sum(1 for d in directed_min_sq(p, q) if math.sqrt(d) <= tau) / len(p)
    recall = sum(1 for d in directed_min_sq(q, p) if math.sqrt(d) <= tau) / len(q)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def mmd(completions, references) -> float:
    return math.fsum(min(chamfer_l2(c, r) for r in references) for c in completions) / len(completions)


def farthest_point_sample(points, m: int, start: int = 0) -> list[int]:
    chosen = [start]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for i, p in enumerate(points):
            d = min(sq_dist(p, points[c]) for c in chosen)
            if d > best_d:  # strict: the first maximizer wins
                best, best_d = i, d
        chosen.append(best)
    return chosen


def group_regions(points, centers, k: int) -> list[list[int]]:
    rows = []
    for c in centers:
        ranked = sorted(range(len(points)), key=lambda i: (sq_dist(points[i], c), i))
        rows.append(ranked[:k])
    return rows


def quantize(features, codes) -> list[int]:
    out = []
    for f in features:
        best, best_d = 0, sq_dist(f, codes[0])
        for j in range(1, len(codes)):
            d = sq_dist(f, codes[j])
            if d < best_d:
                best, best_d = j, d
        out.append(best)
    return out
