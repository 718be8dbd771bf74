"""Lloyd k-means with k-means++ seeding, for clustering caption embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (d, k): one centroid per column
    labels: np.ndarray  # (n,) hard assignments
    objective_history: list[float]  # sum of squared distances after each assignment

    @property
    def objective(self) -> float:
        return self.objective_history[-1]

    def one_hot(self) -> np.ndarray:
        k = self.centroids.shape[1]
        out = np.zeros((len(self.labels), k))
        out[np.arange(len(self.labels)), self.labels] = 1.0
        return out


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, k) squared euclidean distances, computed exactly (no ||x||^2 expansion
    # trick, which can go slightly negative and break tie determinism)
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centers[:1]).min(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
        else:
            centers[j] = points[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, _sq_dists(points, centers[j : j + 1])[:, 0])
    return centers


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Hard-assignment k-means minimizing sum_i ||x_i - c_{a_i}||^2.

    Stops when the relative objective improvement drops below tol or after
    max_iter assignment/update rounds. Empty clusters are re-seeded from the
    point farthest from its current centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n points, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(points, k, rng)
    history: list[float] = []
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = _sq_dists(points, centers)
        labels = d2.argmin(axis=1)
        obj = float(d2[np.arange(n), labels].sum())
        history.append(obj)
        if len(history) >= 2 and history[-2] - obj <= tol * max(history[-2], 1e-12):
            break
        taken: set[int] = set()
        for j in range(k):
            members = points[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                dist_own = d2[np.arange(n), labels].copy()
                dist_own[list(taken)] = -np.inf
                far = int(dist_own.argmax())
                taken.add(far)
                centers[j] = points[far]
    return KMeansResult(centroids=centers.T.copy(), labels=labels, objective_history=history)


def build_cluster_concepts(cls_embeddings: np.ndarray, k: int, seed: int) -> KMeansResult:
    """Cluster sentence-level caption embeddings; cluster ids become image tags."""
    return kmeans(cls_embeddings, k, seed=seed)
