"""Instance-level contrastive loss between class tokens and pooled features.

Each view's class token is pulled toward the max-pooled patch features of
the other view; each cosine term detaches one side, so gradient reaches the
class token through one term and the pooled features through the other.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def global_pool(features: Tensor) -> Tensor:
    """Coordinatewise maximum over rows (1 x d)."""
    if features.shape[0] == 0:
        raise ValueError("cannot pool an empty feature matrix")
    return features.max(axis=0, keepdims=True)


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    na = T.sqrt((a * a).sum())
    nb = T.sqrt((b * b).sum())
    if na.item() == 0.0 or nb.item() == 0.0:
        raise T.DomainError("cosine of a zero-norm vector")
    return (a * b).sum() / (na * nb)


def siamese_distance(f: Tensor, z: Tensor) -> Tensor:
    """2 - cos(f, stop(z)) - cos(stop(f), z); zero iff f, z positively colinear."""
    s1 = _cosine(f, T.stop_gradient(z))
    s2 = _cosine(T.stop_gradient(f), z)
    return 2.0 - s1 - s2


def contrastive_loss(f_a: Tensor, z_b: Tensor, f_b: Tensor, z_a: Tensor) -> Tensor:
    """Symmetric cross-view distance; lies in [0, 8]."""
    return siamese_distance(f_a, z_b) + siamese_distance(f_b, z_a)
