"""Geo-semantic affinity graph over patch centers and reconstructed features.

Fuses spatial proximity (kNN over center distances, distance-decay weights)
with feature similarity (shifted cosine in [0, 2]).  Distances and the kNN
mask are constants during backpropagation; gradient flows only through the
cosine-similarity factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .pointcloud import pairwise_sq_dists

# exponent clamp for the distance-decay weights
_EXP_CLIP = 30.0


@dataclass
class AffinityGraph:
    """Symmetric nonnegative N x N affinity matrix with zero diagonal."""

    weights: Tensor
    k_graph: int


def build_graph(centers: np.ndarray, features: Tensor, k_graph: int) -> AffinityGraph:
    """Affinity construction:

    1. pairwise Euclidean distances between centers,
    2. kNN mask (self excluded before top-k),
    3. shifted cosine similarity 1 + F F^T on unit-normalized feature rows,
    4. distance weighting exp(row_mean(Dis) - Dis) with the exponent clamped,
    5. symmetrization (W + W^T) / 2 and zero diagonal.
    """
    n = centers.shape[0]
    if k_graph >= n:
        raise ValueError(f"k_graph={k_graph} must be smaller than N={n}")
    if not np.all(np.isfinite(features.data)):
        raise T.DomainError("graph features contain non-finite values")

    dis = np.sqrt(np.maximum(pairwise_sq_dists(centers, centers), 0.0))

    # kNN mask, self excluded so step 7's zero diagonal wastes no slot
    dis_noself = dis + np.where(np.eye(n, dtype=bool), np.inf, 0.0)
    order = np.argsort(dis_noself, axis=1, kind="stable")
    mask = np.zeros((n, n))
    np.put_along_axis(mask, order[:, :k_graph], 1.0, axis=1)

    # row-mean distance decay; the mean (rather than a row sum) plus the
    # clamp keeps the exponent bounded for any N
    row_mean = dis.mean(axis=1, keepdims=True)
    decay = np.exp(np.clip(row_mean - dis, -_EXP_CLIP, _EXP_CLIP))

    norms = T.sqrt((features * features).sum(axis=1, keepdims=True))
    unit = features / norms
    cos = unit @ unit.T + 1.0                       # entries in [0, 2]

    w = cos * Tensor(mask * decay)
    w = T.scale(w + w.T, 0.5)
    w = w * Tensor(1.0 - np.eye(n))
    return AffinityGraph(weights=w, k_graph=k_graph)
