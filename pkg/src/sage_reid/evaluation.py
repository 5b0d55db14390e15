"""Retrieval evaluation: cosine distances, mean average precision, CMC.

Standard protocol: per query, gallery entries sharing both identity and
camera with the query are removed, the rest are ranked by distance
(ties broken by gallery index), and AP averages precision at each true
match. Queries left without any valid match are skipped and counted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, ShapeError


@dataclass
class EvalSplit:
    query_features: np.ndarray
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery_features: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray

    def validate(self) -> None:
        if np.any(self.query_cams < 0) or np.any(self.gallery_cams < 0):
            raise DataError("camera ids must be nonnegative")
        for qid, qcam in zip(self.query_ids, self.query_cams):
            cross = (self.gallery_ids == qid) & (self.gallery_cams != qcam)
            if not cross.any():
                raise DataError(f"query identity {qid} has no cross-camera gallery match")


def retrieval_distance(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Cosine distance matrix between L2-normalized feature rows."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise ShapeError(f"query {query.shape} vs gallery {gallery.shape}")
    return np.clip(1.0 - query @ gallery.T, 0.0, 2.0)


def cmc_map(
    dist: np.ndarray,
    q_ids: np.ndarray,
    g_ids: np.ndarray,
    q_cams: np.ndarray,
    g_cams: np.ndarray,
    ranks: Sequence[int] = (1, 5, 10),
) -> dict:
    """mAP and CMC@r with same-identity-same-camera filtering."""
    dist = np.asarray(dist, dtype=np.float64)
    q_ids = np.asarray(q_ids)
    g_ids = np.asarray(g_ids)
    q_cams = np.asarray(q_cams)
    g_cams = np.asarray(g_cams)
    n_query, n_gallery = dist.shape
    if q_ids.shape != (n_query,) or q_cams.shape != (n_query,):
        raise ShapeError("query id/camera arrays do not match the distance matrix")
    if g_ids.shape != (n_gallery,) or g_cams.shape != (n_gallery,):
        raise ShapeError("gallery id/camera arrays do not match the distance matrix")

    aps = []
    cmc_hits = np.zeros(len(ranks))
    skipped = 0
    for qi in range(n_query):
        keep = ~((g_ids == q_ids[qi]) & (g_cams == q_cams[qi]))
        order = np.lexsort((np.arange(n_gallery), dist[qi]))
        order = order[keep[order]]
        matches = g_ids[order] == q_ids[qi]
        if not matches.any():
            skipped += 1
            continue
        positions = np.flatnonzero(matches) + 1  # 1-based ranks
        precisions = np.cumsum(matches)[positions - 1] / positions
        aps.append(float(precisions.mean()))
        first = positions[0]
        for ri, r in enumerate(ranks):
            if first <= r:
                cmc_hits[ri] += 1.0

    evaluated = n_query - skipped
    if evaluated == 0:
        raise DataError("no query has a valid gallery match after filtering")
    result = {
        "mAP": float(np.mean(aps)),
        "cmc": {int(r): float(cmc_hits[ri] / evaluated) for ri, r in enumerate(ranks)},
        "queries_skipped": skipped,
        "queries_evaluated": evaluated,
    }
    return result


def format_metrics_line(metrics: dict) -> str:
    cmc = metrics["cmc"]
    parts = [f"mAP={metrics['mAP']:.6f}"]
    parts += [f"R{r}={cmc[r]:.6f}" for r in sorted(cmc)]
    parts.append(f"queries_skipped={metrics['queries_skipped']}")
    return " ".join(parts)


def evaluate_split(split: EvalSplit, ranks: Sequence[int] = (1, 5, 10)) -> dict:
    dist = retrieval_distance(split.query_features, split.gallery_features)
    return cmc_map(
        dist, split.query_ids, split.gallery_ids, split.query_cams, split.gallery_cams, ranks
    )
