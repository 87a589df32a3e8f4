"""Joint supervision: foreground classification, batch-hard triplet over
M identities x N frames, and the predicted-vs-ground-truth feature
distance term, combined as cls + triplet + gamma * center.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    clip,
    log,
    matmul,
    mul,
    reduce_max,
    reduce_min,
    relu,
    reshape,
    sqrt,
    sum_,
    transpose,
)
from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
BIG = 1e9  # additive mask constant; keeps tensors finite unlike inf


@dataclass
class LossWeights:
    margin: float = 0.3
    center_weight: float = 0.5

    def __post_init__(self):
        if self.margin < 0 or self.center_weight < 0:
            raise ConfigError("margin and center weight must be non-negative")


@dataclass
class TripletBatch:
    """M identities x N frames, stacked as (M*N, C, H, W)."""

    images: np.ndarray
    identity: np.ndarray
    m: int
    n: int

    def __post_init__(self):
        self.identity = np.asarray(self.identity)
        if self.images.shape[0] != self.m * self.n or self.identity.shape[0] != self.m * self.n:
            raise ShapeError(f"batch holds {self.images.shape[0]} images for M*N={self.m * self.n}")
        ids, counts = np.unique(self.identity, return_counts=True)
        if len(ids) != self.m or not np.all(counts == self.n):
            raise ConfigError(f"batch must hold exactly {self.m} identities x {self.n} frames")


def classification_loss(h, y) -> Tensor:
    """Binary cross-entropy against foreground labels, summed over samples."""
    h = as_tensor(h)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=h.dtype)
    hc = clip(h, PROB_EPS, 1.0 - PROB_EPS)
    pos = mul(Tensor(y, dtype=h.dtype), log(hc))
    negt = mul(Tensor(1.0 - y, dtype=h.dtype), log(1.0 - hc))
    return -sum_(pos + negt)


def pairwise_distances(embeddings: Tensor) -> Tensor:
    """Euclidean distance matrix between embedding rows."""
    sq = sum_(mul(embeddings, embeddings), axis=1, keepdims=True)      # (B,1)
    gram = matmul(embeddings, transpose(embeddings))
    d2 = relu(sq + transpose(sq) - 2.0 * gram)  # relu clamps fp negatives
    return sqrt(d2)


def batch_hard_triplet(embeddings: Tensor, labels, margin: float) -> Tensor:
    """Hinge over hardest positive / hardest negative per anchor, summed.

    Anchors whose identity appears once have no positive; their hardest
    positive distance is 0 (the anchor itself) and the case is logged.
    """
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    b = embeddings.shape[0]
    if labels.shape[0] != b:
        raise ShapeError(f"{b} embeddings but {labels.shape[0]} labels")
    _, counts = np.unique(labels, return_counts=True)
    if np.any(counts == 1):
        logger.warning("batch has %d single-frame identities; their hardest-positive distance is 0",
                       int(np.sum(counts == 1)))
    same = (labels[:, None] == labels[None, :])
    dist = pairwise_distances(embeddings)
    same_f = same.astype(np.float64)
    # distances are >= 0, so zeroing the different-identity entries keeps
    # the per-row max over same-identity pairs (self included, distance 0)
    hard_pos = reduce_max(mul(dist, Tensor(same_f, dtype=embeddings.dtype)), axis=1)
    shifted = dist + Tensor(same_f * BIG, dtype=embeddings.dtype)
    hard_neg = reduce_min(shifted, axis=1)
    return sum_(relu(hard_pos - hard_neg + margin))


def center_loss(feat_pred: Tensor, feat_gt: Tensor) -> Tensor:
    """Sum of Euclidean distances between paired feature rows."""
    if feat_pred.shape != feat_gt.shape:
        raise ShapeError(f"feature shapes disagree: {feat_pred.shape} vs {feat_gt.shape}")
    diff = feat_pred - feat_gt
    return sum_(sqrt(sum_(mul(diff, diff), axis=1)))


def joint_loss(cls, tri, cen, gamma: float) -> Tensor:
    """cls + tri + gamma * cen."""
    return cls + tri + gamma * as_tensor(cen)


def l2_normalize(embeddings: Tensor, eps: float = 1e-12) -> Tensor:
    norms = sqrt(sum_(mul(embeddings, embeddings), axis=1, keepdims=True))
    return embeddings / (norms + eps)


def choose_pk_indices(frame_counts: dict, m: int, n: int,
                      rng: np.random.Generator) -> list[tuple]:
    """Pick M identities without replacement, N frame indices per identity.

    Identities with fewer than N frames are sampled with replacement
    (logged once per call).
    """
    ids = sorted(frame_counts)
    if len(ids) < m:
        raise ConfigError(f"need {m} identities, dataset has {len(ids)}")
    chosen = rng.choice(len(ids), size=m, replace=False)
    out = []
    short = 0
    for ci in chosen:
        ident = ids[int(ci)]
        count = frame_counts[ident]
        if count >= n:
            frames = rng.choice(count, size=n, replace=False)
        else:
            short += 1
            frames = rng.choice(count, size=n, replace=True)
        out.extend((ident, int(f)) for f in frames)
    if short:
        logger.warning("%d identities had fewer than %d frames; sampled with replacement", short, n)
    return out


def sample_pk_batch(dataset: dict, m: int, n: int, rng: np.random.Generator) -> TripletBatch:
    """Draw an M x N identity-structured batch from {identity: [images]}."""
    counts = {ident: len(frames) for ident, frames in dataset.items()}
    picks = choose_pk_indices(counts, m, n, rng)
    images = np.stack([np.asarray(dataset[ident][fi], dtype=np.float32) for ident, fi in picks])
    labels = np.array([ident for ident, _ in picks])
    return TripletBatch(images=images, identity=labels, m=m, n=n)
