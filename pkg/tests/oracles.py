"""Independent reference computations used by several test modules."""

from __future__ import annotations

import itertools

import numpy as np


def partition_of(labels, ids) -> frozenset:
    groups: dict[int, set] = {}
    for uid, c in zip(ids, labels):
        groups.setdefault(int(c), set()).add(uid)
    return frozenset(frozenset(g) for g in groups.values())


def brute_force_partition(points: np.ndarray, k: int, chunk: int = 1 << 16):
    """Exhaustive minimal within-cluster SSE over all k**n labelings with no empty cluster.

    Returns ``(best_labels, best_sse)``. Uses ``SSE = sum |x|^2 - sum_c |S_c|^2 / n_c``.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    gram = x @ x.T
    total = float(np.trace(gram))
    best_sse, best = np.inf, None
    all_labels = itertools.product(range(k), repeat=n)
    while True:
        block = np.array(list(itertools.islice(all_labels, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        explained = np.zeros(block.shape[0])
        valid = np.ones(block.shape[0], dtype=bool)
        for c in range(k):
            m = (block == c).astype(np.float64)
            size = m.sum(axis=1)
            valid &= size > 0
            explained += np.where(size > 0, np.einsum("ij,ij->i", m @ gram, m) / np.maximum(size, 1), 0.0)
        sse = np.where(valid, total - explained, np.inf)
        i = int(np.argmin(sse))
        if sse[i] < best_sse:
            best_sse, best = float(sse[i]), block[i].copy()
    return best, best_sse


def is_local_optimum(points: np.ndarray, labels, centroids: np.ndarray, eps: float = 1e-12) -> bool:
    """No point is strictly closer to a foreign centroid than to its own."""
    x = np.asarray(points, dtype=np.float64)
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    own = d2[np.arange(len(x)), np.asarray(labels)]
    return bool(np.all(own <= d2.min(axis=1) + eps))
