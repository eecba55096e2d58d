"""Confidence/correctness gaps and one-dimensional k-means over them."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

MAX_ITER = 300


def compute_gaps(records) -> np.ndarray:
    """``|confidence - 1{predicted == label}|`` per record."""
    if len(records) == 0:
        return np.zeros(0)
    conf = np.array([r.confidence for r in records], dtype=np.float64)
    correct = np.array([r.predicted == r.label for r in records], dtype=np.float64)
    if np.any(~np.isfinite(conf)) or np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0, 1]")
    return np.abs(conf - correct)


@dataclass
class ClusterAssignment:
    """Sorted centres; cluster ``k - 1`` holds the largest values."""

    k: int
    centers: np.ndarray
    ids: np.ndarray
    inertia: float
    requested_k: int
    history: List[float] = field(default_factory=list)

    def counts(self) -> np.ndarray:
        return np.bincount(self.ids, minlength=self.k)

    def report(self, values) -> dict:
        values = np.asarray(values, dtype=np.float64)
        counts = self.counts()
        means = [float(values[self.ids == c].mean()) if counts[c] else None for c in range(self.k)]
        return {
            "k": self.k,
            "requested_k": self.requested_k,
            "centers": [float(c) for c in self.centers],
            "counts": [int(c) for c in counts],
            "mean_gap": means,
            "inertia": self.inertia,
        }


def assign_clusters(values, centers) -> np.ndarray:
    """Index of the nearest centre; equidistant values go to the lower index."""
    v = np.asarray(values, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    if c.size == 0:
        raise ValueError("need at least one center")
    # argmin returns the first minimum
    return np.argmin(np.abs(v[:, None] - c[None, :]), axis=1)


def _inertia(values, centers, ids) -> float:
    return float(np.sum((values - centers[ids]) ** 2))


def _plusplus(values: np.ndarray, k: int, rng) -> np.ndarray:
    centers = [values[rng.integers(values.size)]]
    d2 = (values - centers[0]) ** 2
    for _ in range(1, k):
        centers.append(values[rng.choice(values.size, p=d2 / d2.sum())])
        d2 = np.minimum(d2, (values - centers[-1]) ** 2)
    return np.array(centers)


def _optimal_start(values: np.ndarray, k: int) -> np.ndarray:
    """Segment means of the least-squares contiguous partition of the sorted values."""
    s = np.sort(values)
    n = s.size
    s1 = np.concatenate([[0.0], np.cumsum(s)])
    s2 = np.concatenate([[0.0], np.cumsum(s * s)])

    def cost(i, j):
        # SSE of s[i:j] for an array of starts i and a fixed end j
        m = j - i
        return s2[j] - s2[i] - (s1[j] - s1[i]) ** 2 / m

    best = np.full(n + 1, np.inf)
    best[1:] = cost(np.zeros(n, dtype=np.int64), np.arange(1, n + 1))
    cuts = np.zeros((k, n + 1), dtype=np.int64)
    for layer in range(1, k):
        nxt = np.full(n + 1, np.inf)
        for j in range(layer + 1, n + 1):
            starts = np.arange(layer, j)
            total = best[starts] + cost(starts, j)
            a = int(np.argmin(total))
            nxt[j] = total[a]
            cuts[layer, j] = starts[a]
        best = nxt
    bounds = [n]
    for layer in range(k - 1, 0, -1):
        bounds.append(cuts[layer, bounds[-1]])
    bounds.append(0)
    bounds.reverse()
    return np.array([s[bounds[i]:bounds[i + 1]].mean() for i in range(k)])


def _lloyd(values: np.ndarray, centers: np.ndarray):
    ids = assign_clusters(values, centers)
    history = [_inertia(values, centers, ids)]
    for _ in range(MAX_ITER):
        counts = np.bincount(ids, minlength=centers.size)
        sums = np.bincount(ids, weights=values, minlength=centers.size)
        centers = np.where(counts > 0, sums / np.maximum(counts, 1), centers)
        for c in np.flatnonzero(counts == 0):
            # seize the point farthest from its centre
            far = int(np.argmax(np.abs(values - centers[ids])))
            ids[far] = c
            centers[c] = values[far]
        history.append(_inertia(values, centers, ids))
        new_ids = assign_clusters(values, centers)
        if np.array_equal(new_ids, ids):
            break
        ids = new_ids
        history.append(_inertia(values, centers, ids))
    return centers, ids, history


def kmeans_1d(values, k: int, seed: int = 0, n_init: int = 10) -> ClusterAssignment:
    """k-means++ seeded Lloyd iterations on scalar values.

    The best of ``n_init`` seeded restarts plus one start from the exact
    least-squares contiguous partition is kept. When there are fewer
    distinct values than ``k``, ``k`` drops to that count.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("kmeans_1d needs at least one value")
    if k < 1:
        raise ValueError("k must be at least 1")
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    distinct = np.unique(v)
    k_eff = min(k, distinct.size)
    rng = np.random.default_rng(seed)
    starts = [_plusplus(v, k_eff, rng) for _ in range(max(1, n_init))]
    # Lloyd alone has local optima in 1-D; the exact partition is a fixpoint
    starts.append(_optimal_start(v, k_eff))
    best = None
    for init in starts:
        centers, ids, history = _lloyd(v, init)
        score = _inertia(v, centers, ids)
        if best is None or score < best[0] - 1e-15:
            best = (score, centers, history)
    centers = np.sort(best[1])
    ids = assign_clusters(v, centers)
    return ClusterAssignment(k_eff, centers, ids, _inertia(v, centers, ids), k, best[2])
