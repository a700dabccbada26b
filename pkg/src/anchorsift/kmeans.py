"""Seeded k-means: k-means++ seeding, Lloyd iterations, farthest-point repair.

Two metrics share one loop. ``"l2"`` is textbook k-means (used for PQ
sub-spaces). ``"ip"`` is spherical k-means: points are assigned by largest
inner product and centroids are renormalised after every update (used for
the coarse quantizer over unit embeddings).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import TooFewPoints


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray  # (k, d) float32
    labels: np.ndarray  # (n,) int64
    inertia: float  # sum of squared L2 distances to the assigned centroid
    n_iter: int


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (int, np.integer)):
        seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
    return np.random.default_rng(seed)


def _assign(X, C, metric):
    """Labels plus squared L2 distance to the chosen centroid."""
    if metric == "ip":
        labels, best = _kernels.assign_ip(X, C)
        # unit rows: |x - c|^2 = 2 - 2 <x, c>
        return labels, np.maximum(2.0 - 2.0 * best, 0.0)
    return _kernels.assign_l2(X, C)


def _normalize_rows64(A: np.ndarray) -> np.ndarray:
    sq = np.zeros(A.shape[0], dtype=np.float64)
    for j in range(A.shape[1]):
        sq += A[:, j] * A[:, j]
    norms = np.sqrt(sq)
    ok = norms > 0
    A = A.copy()
    A[ok] /= norms[ok, None]
    return A


def kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    _, d2 = _kernels.assign_l2(X, X[chosen[0] : chosen[0] + 1])
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for _ in range(1, k):
        cs = np.cumsum(d2)
        total = cs[-1]
        if total <= 0.0:
            # every remaining point coincides with a centre already picked
            idx = int(np.flatnonzero(~taken)[0])
        else:
            idx = int(np.searchsorted(cs, rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        chosen.append(idx)
        taken[idx] = True
        _, dn = _kernels.assign_l2(X, X[idx : idx + 1])
        d2 = np.minimum(d2, dn)
    return X[chosen].copy()


def kmeans_train(X, k: int, seed=0, max_iter: int = 25, metric: str = "l2") -> KMeansResult:
    """Cluster the rows of ``X`` into ``k`` groups.

    Deterministic for a fixed seed and backend. Iterates until ``max_iter``
    updates or until an update leaves every assignment unchanged. A cluster
    that empties is re-seeded with the point farthest from its own centroid.
    """
    if metric not in ("l2", "ip"):
        raise ValueError(f"unknown metric {metric!r}")
    X = np.ascontiguousarray(getattr(X, "rows", X), dtype=np.float32)
    n = X.shape[0]
    if k < 1 or n < k:
        raise TooFewPoints(f"need at least k={k} points, got {n}")
    rng = _rng(seed)

    C = kmeanspp_init(X, k, rng)
    if metric == "ip":
        C = _normalize_rows64(C.astype(np.float64)).astype(np.float32)
    labels, dist = _assign(X, C, metric)
    n_iter = 0
    for it in range(max_iter):
        sums, counts = _kernels.cluster_sums(X, labels, k)
        newC = np.empty_like(sums)
        filled = counts > 0
        newC[filled] = sums[filled] / counts[filled, None]
        empties = np.flatnonzero(~filled)
        if empties.size:
            far = dist.copy()
            for c in empties:
                # farthest point, ties -> smallest index (argmax picks the first)
                p = int(np.argmax(far))
                newC[c] = X[p]
                far[p] = -1.0
        if metric == "ip":
            newC = _normalize_rows64(newC)
        C = newC.astype(np.float32)
        new_labels, dist = _assign(X, C, metric)
        n_iter = it + 1
        changed = not np.array_equal(new_labels, labels)
        labels = new_labels
        if not changed:
            break
    return KMeansResult(C, labels, float(dist.sum()), n_iter)
