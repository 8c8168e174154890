"""Exact k-nearest-neighbour ranking.

Distances are computed in floating point, which can order two points at the
same true distance either way. Candidates whose float distance is within
rounding of the k-th boundary are re-ranked with exact rational arithmetic,
so the result is the true k nearest points with equal distances going to the
lower index.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

# float squared distances carry a relative error far below this
REL_SLACK = 1e-12
TINY = 1e-300


def _exact_d2(p, q) -> Fraction:
    return sum((Fraction(float(a)) - Fraction(float(b))) ** 2 for a, b in zip(p, q))


def _exact_order(points, query, idx) -> list[int]:
    return sorted((int(i) for i in idx), key=lambda i: (_exact_d2(points[i], query), i))


def within_radius(points, query, idx, d2, max_radius: float) -> np.ndarray:
    """Subset of ``idx`` (order kept) whose exact distance is <= max_radius."""
    if math.isinf(max_radius):
        return idx
    r2 = max_radius * max_radius
    keep = []
    for i, v in zip(idx, d2):
        if v < r2 * (1 - REL_SLACK):
            keep.append(i)
        elif v <= r2 * (1 + REL_SLACK) + TINY:
            if _exact_d2(points[i], query) <= Fraction(max_radius) ** 2:
                keep.append(i)
    return np.array(keep, dtype=np.int64)


def nearest(points, queries, k: int, chunk: int = 256):
    """Indices (n_queries, k) of the k nearest points in order, plus their
    float squared distances."""
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    k = min(k, points.shape[0])
    idx = np.empty((queries.shape[0], k), dtype=np.int64)
    dist2 = np.empty((queries.shape[0], k))
    for s in range(0, queries.shape[0], chunk):
        q = queries[s:s + chunk]
        diff = q[:, None, :] - points[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        order = np.argsort(d2, axis=1, kind="stable")
        top = np.take_along_axis(d2, order[:, :k], axis=1)
        bound = top[:, -1] * (1 + REL_SLACK) + TINY
        crowded = (d2 <= bound[:, None]).sum(axis=1) > k
        close = (top[:, 1:] <= top[:, :-1] * (1 + REL_SLACK) + TINY).any(axis=1)
        for r in np.flatnonzero(crowded | close):
            cand = np.flatnonzero(d2[r] <= bound[r])
            order[r, :k] = _exact_order(points, q[r], cand)[:k]
        idx[s:s + chunk] = order[:, :k]
        dist2[s:s + chunk] = np.take_along_axis(d2, order[:, :k], axis=1)
    return idx, dist2
