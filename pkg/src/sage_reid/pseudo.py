"""Pseudo-labels for self-training: cosine distances, DBSCAN, bookkeeping.

DBSCAN follows the classic core/border/noise semantics on a precomputed
distance matrix. Output labels are canonical: clusters are numbered by the
smallest member index, and border points attach to their nearest adjacent
core (ties to the lowest core index), so the labeling depends only on the
geometry and not on traversal order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DomainError


@dataclass
class PseudoLabelSet:
    labels: np.ndarray      # int, -1 for noise
    n_clusters: int
    noise_mask: np.ndarray  # bool, True where label == -1
    epoch: int = 0

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.size:
            present = set(np.unique(labels[labels >= 0]).tolist())
            if present != set(range(self.n_clusters)):
                raise DataError(
                    f"cluster ids {sorted(present)} are not contiguous 0..{self.n_clusters - 1}"
                )
            if np.any(labels < -1):
                raise DataError("labels below -1 are not allowed")
        elif self.n_clusters != 0:
            raise DataError("empty labeling cannot have clusters")
        if not np.array_equal(self.noise_mask, labels == -1):
            raise DataError("noise mask inconsistent with labels")


def pairwise_distance(features: np.ndarray) -> np.ndarray:
    """Cosine distance 1 - <z_i, z_j> between L2-normalized rows."""
    features = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise DataError("features hold non-finite values")
    dist = 1.0 - features @ features.T
    dist = np.clip((dist + dist.T) / 2.0, 0.0, 2.0)
    np.fill_diagonal(dist, 0.0)
    return dist


def select_eps(dist: np.ndarray, percentile: float) -> float:
    """Radius at the given percentile of the off-diagonal distance distribution."""
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if n < 2:
        raise DataError("need at least two points to pick a radius")
    off_diag = dist[~np.eye(n, dtype=bool)]
    return float(np.percentile(off_diag, percentile))


def _validate_distance(dist: np.ndarray) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise DataError(f"distance matrix must be square, got {dist.shape}")
    if np.abs(dist - dist.T).max(initial=0.0) > 1e-9:
        raise DataError("distance matrix is asymmetric")
    if dist.shape[0] and np.abs(np.diag(dist)).max() > 1e-9:
        raise DataError("distance matrix has a nonzero diagonal")
    return dist


def dbscan(dist: np.ndarray, eps: float, min_pts: int, epoch: int = 0) -> PseudoLabelSet:
    """Density clustering on a distance matrix.

    Core points have at least ``min_pts`` neighbors within ``eps`` (self
    included); clusters are connected components of cores under
    eps-adjacency; border points join the cluster of their nearest adjacent
    core. Everything else is noise.
    """
    dist = _validate_distance(dist)
    if eps <= 0.0:
        raise DomainError("eps must be positive")
    if min_pts < 1:
        raise DomainError("min_pts must be at least 1")

    n = dist.shape[0]
    neighbors = dist <= eps
    core = neighbors.sum(axis=1) >= min_pts
    labels = np.full(n, -1, dtype=np.int64)

    next_id = 0
    for start in range(n):
        if not core[start] or labels[start] != -1:
            continue
        frontier = [start]
        labels[start] = next_id
        while frontier:
            i = frontier.pop()
            for j in np.flatnonzero(neighbors[i] & core):
                if labels[j] == -1:
                    labels[j] = next_id
                    frontier.append(int(j))
        next_id += 1

    for i in range(n):
        if core[i] or labels[i] != -1:
            continue
        adjacent = np.flatnonzero(neighbors[i] & core)
        if adjacent.size:
            nearest = adjacent[np.argmin(dist[i, adjacent])]
            labels[i] = labels[nearest]

    return relabel_contiguous(labels, epoch=epoch)


def relabel_contiguous(labels: np.ndarray, epoch: int = 0) -> PseudoLabelSet:
    """Renumber clusters 0..k-1 in order of their smallest member index."""
    labels = np.asarray(labels, dtype=np.int64)
    mapping: dict[int, int] = {}
    out = np.full(labels.shape, -1, dtype=np.int64)
    for i, value in enumerate(labels):
        if value < 0:
            continue
        if value not in mapping:
            mapping[value] = len(mapping)
        out[i] = mapping[value]
    return PseudoLabelSet(
        labels=out,
        n_clusters=len(mapping),
        noise_mask=out == -1,
        epoch=epoch,
    )
