"""Training objectives: cross-entropy + margin triplet, with PK batching.

The triplet set is mined batch-hard: every sample anchors one triplet built
from its farthest in-class positive and nearest out-of-class negative,
using Euclidean distances on the pre-BN features. The combined objective is
the plain sum of per-sample CE terms plus lambda times the sum of mined
triplet hinges.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import SamplingError, ShapeError
from .rng import derive_rng

# keeps sqrt differentiable when a mined positive coincides with its anchor;
# shifts distances by under 1e-12
_DIST_EPS = 1e-24


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True)
class SamplerConfig:
    p: int = 4  # identities per batch
    k: int = 4  # samples per identity
    seed: int = 0

    def __post_init__(self):
        if self.p < 2 or self.k < 2:
            raise SamplingError("PK sampling needs at least 2 identities and 2 samples each")

    @property
    def batch_size(self) -> int:
        return self.p * self.k


def cross_entropy(logits, y: int) -> Tensor:
    """-log softmax(logits)[y], computed through log-sum-exp."""
    logits = ad.as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError(f"expected a logit vector, got {logits.shape}")
    n = logits.shape[0]
    if not 0 <= y < n:
        raise IndexError(f"label {y} out of range for {n} classes")
    return ad.sub(ad.logsumexp(logits, axis=0), logits[(y,)])


def cross_entropy_batch(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Sum of per-row cross-entropies for (B, C) logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise IndexError("label out of range")
    lse = ad.logsumexp(logits, axis=1)
    picked = logits[(np.arange(logits.shape[0]), labels)]
    return ad.sum_(ad.sub(lse, picked))


def _row_distances(a: Tensor, b: Tensor) -> Tensor:
    diff = ad.sub(a, b)
    return ad.sqrt(ad.add(ad.sum_(ad.mul(diff, diff), axis=-1), _DIST_EPS))


def triplet_loss(z_a, z_p, z_n, margin: float) -> Tensor:
    """max(0, margin + ||z_a - z_p|| - ||z_a - z_n||), subgradient 0 at the kink."""
    z_a, z_p, z_n = ad.as_tensor(z_a), ad.as_tensor(z_p), ad.as_tensor(z_n)
    d_ap = _row_distances(z_a, z_p)
    d_an = _row_distances(z_a, z_n)
    return ad.maximum0(ad.add(ad.sub(d_ap, d_an), margin))


def batch_hard_mine(features: np.ndarray, labels: np.ndarray) -> list[Triplet]:
    """One triplet per anchor: farthest positive, nearest negative.

    Ties break toward the lowest index. Requires every label to occur at
    least twice and at least two distinct labels in the batch.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"features {features.shape} vs labels {labels.shape}")
    values, counts = np.unique(labels, return_counts=True)
    if np.any(counts < 2):
        lonely = values[counts < 2].tolist()
        raise SamplingError(f"labels {lonely} occur once; PK sampling contract violated")
    if values.size < 2:
        raise SamplingError("batch holds a single identity; no negatives exist")

    diff = features[:, None, :] - features[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    same = labels[:, None] == labels[None, :]

    triplets = []
    for a in range(n):
        pos_mask = same[a].copy()
        pos_mask[a] = False
        pos_candidates = np.flatnonzero(pos_mask)
        neg_candidates = np.flatnonzero(~same[a])
        hardest_pos = pos_candidates[np.argmax(dist[a, pos_candidates])]
        hardest_neg = neg_candidates[np.argmin(dist[a, neg_candidates])]
        triplets.append(Triplet(a, int(hardest_pos), int(hardest_neg)))
    return triplets


def triplet_loss_batch(features: Tensor, triplets: Sequence[Triplet], margin: float) -> Tensor:
    """Sum of hinge losses over mined triplets, on (B, D) features."""
    if not triplets:
        return Tensor(0.0)
    a_idx = np.array([t.anchor for t in triplets])
    p_idx = np.array([t.positive for t in triplets])
    n_idx = np.array([t.negative for t in triplets])
    z_a, z_p, z_n = features[(a_idx,)], features[(p_idx,)], features[(n_idx,)]
    return ad.sum_(triplet_loss(z_a, z_p, z_n, margin))


def combined_loss(
    logits: Tensor,
    labels: np.ndarray,
    features: Tensor,
    margin: float,
    lam: float,
) -> Tensor:
    """Sum CE + lam * sum of batch-hard triplet hinges."""
    ce = cross_entropy_batch(logits, labels)
    if lam == 0.0:
        return ce
    triplets = batch_hard_mine(features.data, labels)
    return ad.add(ce, ad.mul(triplet_loss_batch(features, triplets, margin), lam))


def pk_sample(labels: np.ndarray, cfg: SamplerConfig, epoch: int) -> list[list[int]]:
    """Identity-balanced batches: P identities x K samples, deterministic
    in (cfg.seed, epoch).

    Identities are drawn without replacement within a batch; an identity
    with fewer than K samples is padded by drawing with replacement.
    Trailing identities that cannot fill a batch of P are dropped.
    """
    labels = np.asarray(labels, dtype=np.int64)
    identities = np.unique(labels)
    if identities.size < cfg.p:
        raise SamplingError(f"{identities.size} identities available, {cfg.p} required per batch")
    rng = derive_rng(cfg.seed, "pk-sample", epoch)
    order = rng.permutation(identities)
    batches = []
    for start in range(0, identities.size - cfg.p + 1, cfg.p):
        batch: list[int] = []
        for ident in order[start : start + cfg.p]:
            members = np.flatnonzero(labels == ident)
            if members.size >= cfg.k:
                chosen = rng.choice(members, size=cfg.k, replace=False)
            else:
                chosen = rng.choice(members, size=cfg.k, replace=True)
            batch.extend(int(i) for i in chosen)
        batches.append(batch)
    return batches
