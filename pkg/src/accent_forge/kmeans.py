"""Seeded k-means with k-means++ initialization."""
from __future__ import annotations

import numpy as np


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already coincides with a center
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j:j + 1])[:, 0])
    return centers


def assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, i.e. ties go to the lowest cluster index
    return np.argmin(_sq_dists(x, centers), axis=1)


def kmeans(x, k: int, iters: int = 50, seed: int = 0, rng=None):
    """Lloyd iterations from a k-means++ start.

    Returns ``(centers, labels)``.  ``k`` is clipped to the number of points.
    Empty clusters keep their previous center.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("kmeans needs a non-empty 2-D array")
    k = min(k, x.shape[0])
    rng = np.random.default_rng(seed) if rng is None else rng
    centers = kmeans_pp_init(x, k, rng)
    labels = assign(x, centers)
    for _ in range(iters):
        new = centers.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
        centers = new
        new_labels = assign(x, centers)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centers, labels
