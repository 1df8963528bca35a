"""Differentiable clustering head and its two reconstruction losses.

Graph message passing refines the reconstructed patch features, a two-layer
projection with temperature softmax yields a row-stochastic score matrix S,
and assignment-weighted pooling of the patch centers produces K cluster
centers.  The balanced target assignment is an entropically regularized
transport plan with uniform marginals (1/N rows, 1/K columns), solved by
log-domain Sinkhorn scaling and detached from the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .graph import AffinityGraph
from .pointcloud import pairwise_sq_dists


@dataclass
class ClusterHead:
    """Mixing/skip matrices for message passing plus the score projection."""

    w_mix: Tensor
    w_skip: Tensor
    w_proj1: Tensor
    w_proj2: Tensor
    temperature: float
    n_clusters: int

    @staticmethod
    def create(dim: int, n_clusters: int, rng: np.random.Generator,
               temperature: float = 1.0, init_std: float = 0.02) -> "ClusterHead":
        if n_clusters < 2:
            raise ValueError(f"need at least 2 clusters, got {n_clusters}")
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")

        def w(shape):
            return Tensor(rng.normal(0.0, init_std, size=shape), requires_grad=True)

        return ClusterHead(
            w_mix=w((dim, dim)), w_skip=w((dim, dim)),
            w_proj1=w((dim, dim)), w_proj2=w((dim, n_clusters)),
            temperature=temperature, n_clusters=n_clusters,
        )

    def parameters(self, prefix: str = "cluster") -> dict[str, Tensor]:
        return {
            f"{prefix}.w_mix": self.w_mix, f"{prefix}.w_skip": self.w_skip,
            f"{prefix}.w_proj1": self.w_proj1, f"{prefix}.w_proj2": self.w_proj2,
        }


@dataclass
class SinkhornConfig:
    epsilon: float = 5e-4
    max_iters: int = 200
    marginal_tol: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass
class SinkhornResult:
    plan: np.ndarray
    converged: bool
    marginal_error: float
    iterations: int


@dataclass
class ClusterState:
    scores: Tensor                 # N x K, row-stochastic
    pooled_centers: Tensor         # K x 3
    plan: SinkhornResult | None = field(default=None)


def message_pass(graph: AffinityGraph, features: Tensor, head: ClusterHead) -> Tensor:
    """relu(W (F W_mix)) + F W_skip."""
    return T.relu(graph.weights @ (features @ head.w_mix)) + features @ head.w_skip


def cluster_scores(hidden: Tensor, head: ClusterHead) -> Tensor:
    """Row-stochastic assignment scores via the two-layer projection."""
    if head.temperature <= 0:
        raise ValueError(f"temperature must be positive, got {head.temperature}")
    logits = T.relu(hidden @ head.w_proj1) @ head.w_proj2
    return T.softmax(logits, temperature=head.temperature)


def pool_centers(scores: Tensor, centers: np.ndarray) -> Tensor:
    """Assignment-weighted mean of patch centers per cluster (K x 3)."""
    col_sums = scores.sum(axis=0, keepdims=True)       # 1 x K
    weighted = scores.T @ Tensor(centers)              # K x 3
    return weighted / col_sums.T


def sinkhorn_assign(points: np.ndarray, targets: np.ndarray,
                    cfg: SinkhornConfig | None = None,
                    error_trace: list | None = None) -> SinkhornResult:
    """Balanced transport plan between points and targets.

    Solves the entropically regularized assignment with squared-distance
    cost and uniform marginals (rows 1/N, columns 1/K) by alternating
    log-domain potential updates.  A short epsilon-scaling warm start keeps
    the iteration stable for very small regularization.  The plan is plain
    numpy, detached from any differentiation tape.
    """
    cfg = cfg or SinkhornConfig()
    n, k = points.shape[0], targets.shape[0]
    if n < k or k < 2:
        raise ValueError(f"need N >= K >= 2, got N={n}, K={k}")
    cost = pairwise_sq_dists(points, targets)          # N x K
    log_a = np.full(n, -np.log(n))
    log_b = np.full(k, -np.log(k))

    f = np.zeros(n)
    g = np.zeros(k)

    def lse_rows(mat):
        mx = mat.max(axis=1, keepdims=True)
        return (mx + np.log(np.exp(mat - mx).sum(axis=1, keepdims=True)))[:, 0]

    # warm start at larger epsilon, then anneal down to the requested value
    eps_path = []
    eps = max(cfg.epsilon, 1e-300)
    start = max(cost.max(), eps * 10.0)
    e = start
    while e > eps * 10.0:
        eps_path.append(e)
        e /= 10.0
    eps_path.append(eps)

    iterations = 0
    err = np.inf
    converged = False
    for stage, e in enumerate(eps_path):
        final = stage == len(eps_path) - 1
        budget = cfg.max_iters if final else min(cfg.max_iters, 20)
        for _ in range(budget):
            m = (f[:, None] + g[None, :] - cost) / e
            g = g + e * (log_b - lse_rows(m.T))
            m = (f[:, None] + g[None, :] - cost) / e
            f = f + e * (log_a - lse_rows(m))
            iterations += 1
            plan = np.exp((f[:, None] + g[None, :] - cost) / e)
            col_err = np.abs(plan.sum(axis=0) - 1.0 / k).max()
            row_err = np.abs(plan.sum(axis=1) - 1.0 / n).max()
            err = max(row_err, col_err)
            if final and error_trace is not None:
                error_trace.append(err)
            if final and err < cfg.marginal_tol:
                converged = True
                break
        if converged:
            break
    plan = np.exp((f[:, None] + g[None, :] - cost) / eps_path[-1])
    return SinkhornResult(plan=plan, converged=converged,
                          marginal_error=float(err), iterations=iterations)


def chamfer(x, y) -> Tensor:
    """Symmetric Chamfer distance: both-direction means of squared nearest
    distances.  Nearest-neighbor selection is constant during backward."""
    x_t = x if isinstance(x, Tensor) else Tensor(x)
    y_t = y if isinstance(y, Tensor) else Tensor(y)
    if x_t.data.shape[0] == 0 or y_t.data.shape[0] == 0:
        raise ValueError("Chamfer distance of an empty point set")
    sq = pairwise_sq_dists(x_t.data, y_t.data)
    nn_xy = np.argmin(sq, axis=1)
    nn_yx = np.argmin(sq, axis=0)
    d_xy = x_t - T.gather_rows(y_t, nn_xy)
    d_yx = y_t - T.gather_rows(x_t, nn_yx)
    return (d_xy * d_xy).sum(axis=1).mean() + (d_yx * d_yx).sum(axis=1).mean()


def center_loss(centers_a: np.ndarray, centers_b: np.ndarray,
                pooled_a: Tensor, pooled_b: Tensor) -> Tensor:
    """Cross-view cluster-center reconstruction loss."""
    return chamfer(centers_a, pooled_b) + chamfer(centers_b, pooled_a)


def assignment_loss(scores_ab: Tensor, plan_ab: np.ndarray,
                    scores_ba: Tensor, plan_ba: np.ndarray) -> Tensor:
    """Cross-entropy of detached transport plans against log-scores.

    Both direction pairings are scaled by 1/N; gradient reaches only the
    score matrices.
    """
    n = scores_ab.shape[0]
    term_ab = (Tensor(np.asarray(plan_ab)) * T.tlog(scores_ab)).sum()
    term_ba = (Tensor(np.asarray(plan_ba)) * T.tlog(scores_ba)).sum()
    return T.scale(term_ab + term_ba, -1.0 / n)
