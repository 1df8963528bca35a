"""Point-cloud geometry kernels and patch tokenization.

Decomposes a raw H x 3 cloud into N patches: farthest-point-sampled centers,
k-nearest neighborhoods in center-relative coordinates, and per-patch tokens
from a small shared point-set encoder (point-wise MLPs with max-pooling).

All kernels use brute-force distances; ties break toward the lowest index so
results are reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class PointCloud:
    """Raw points (H x 3) with an optional class label for probe datasets."""

    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be H x 3, got {self.points.shape}")
        if self.points.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


@dataclass
class PatchSet:
    """FPS centers, center-relative kNN neighborhoods, and patch tokens."""

    centers: np.ndarray          # N x 3
    neighborhoods: np.ndarray    # N x k_patch x 3, center-relative
    tokens: Tensor | None = None  # N x d once embedded

    @property
    def num_patches(self) -> int:
        return self.centers.shape[0]

    @property
    def k_patch(self) -> int:
        return self.neighborhoods.shape[1]


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of a (M x 3) and b (H x 3)."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("mhd,mhd->mh", diff, diff)


def farthest_point_sample(cloud: PointCloud, n: int, seed: int) -> np.ndarray:
    """Greedy maximin subset selection.

    The first index is drawn uniformly from a generator seeded with `seed`;
    each subsequent pick maximizes the minimum distance to the selected set,
    breaking ties toward the lowest index.
    """
    h = cloud.num_points
    if n > h:
        raise ValueError(f"cannot sample {n} points from a cloud of {h}")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(h))
    selected = np.empty(n, dtype=np.intp)
    selected[0] = first
    min_sq = pairwise_sq_dists(cloud.points[first:first + 1], cloud.points)[0]
    for i in range(1, n):
        nxt = int(np.argmax(min_sq))  # argmax returns the lowest tied index
        selected[i] = nxt
        d = pairwise_sq_dists(cloud.points[nxt:nxt + 1], cloud.points)[0]
        np.minimum(min_sq, d, out=min_sq)
    return selected


def knn(queries: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest reference points per query row.

    Rows are sorted ascending by distance; equal distances order by index
    (stable sort on the distance matrix).
    """
    if k > reference.shape[0]:
        raise ValueError(f"k={k} exceeds reference size {reference.shape[0]}")
    sq = pairwise_sq_dists(np.asarray(queries, dtype=np.float64),
                           np.asarray(reference, dtype=np.float64))
    order = np.argsort(sq, axis=1, kind="stable")
    return order[:, :k]


def build_patches(cloud: PointCloud, n: int, k_patch: int, seed: int) -> PatchSet:
    """Patchify a cloud: FPS centers, then kNN neighborhoods shifted by -center."""
    if k_patch > cloud.num_points:
        raise ValueError(f"k_patch={k_patch} exceeds cloud size {cloud.num_points}")
    idx = farthest_point_sample(cloud, n, seed)
    centers = cloud.points[idx]
    nn_idx = knn(centers, cloud.points, k_patch)
    neighborhoods = cloud.points[nn_idx] - centers[:, None, :]
    return PatchSet(centers=centers, neighborhoods=neighborhoods)


# ----------------------------------------------------------------------
# mini point-set encoder


@dataclass
class MiniPointNet:
    """Shared two-stage point-wise MLP with an intermediate max-pool.

    Stage 1 lifts each point 3 -> 64 -> 128; the per-patch max-pooled vector
    is concatenated back onto every point feature; stage 2 maps 256 -> 256 ->
    d and a final max-pool over the patch yields the token.
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    w4: Tensor
    b4: Tensor
    out_dim: int = field(default=0)

    @staticmethod
    def create(out_dim: int, rng: np.random.Generator, init_std: float = 0.02) -> "MiniPointNet":
        def w(shape):
            return Tensor(rng.normal(0.0, init_std, size=shape), requires_grad=True)

        def b(n):
            return Tensor(np.zeros(n), requires_grad=True)

        return MiniPointNet(
            w1=w((3, 64)), b1=b(64),
            w2=w((64, 128)), b2=b(128),
            w3=w((256, 256)), b3=b(256),
            w4=w((256, out_dim)), b4=b(out_dim),
            out_dim=out_dim,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {
            "pointnet.w1": self.w1, "pointnet.b1": self.b1,
            "pointnet.w2": self.w2, "pointnet.b2": self.b2,
            "pointnet.w3": self.w3, "pointnet.b3": self.b3,
            "pointnet.w4": self.w4, "pointnet.b4": self.b4,
        }


def embed_patches(patches: PatchSet, encoder: MiniPointNet) -> Tensor:
    """Encode each neighborhood into a d-dimensional token (N x d).

    Permutation-invariant over points within a patch and differentiable
    through all encoder weights.
    """
    n, k, _ = patches.neighborhoods.shape
    d = encoder.out_dim
    if encoder.w4.shape[1] != d:
        raise ValueError("encoder output dimension inconsistent with its weights")
    pts = Tensor(patches.neighborhoods.reshape(n * k, 3))
    h = T.relu(pts @ encoder.w1 + encoder.b1)
    h = T.relu(h @ encoder.w2 + encoder.b2)          # (n*k, 128)
    h = h.reshape((n, k, 128))
    pooled = h.max(axis=1, keepdims=True)            # (n, 1, 128)
    tiled = pooled * Tensor(np.ones((1, k, 1)))      # broadcast to (n, k, 128)
    h = T.concat([h, tiled], axis=2)                 # (n, k, 256)
    h = h.reshape((n * k, 256))
    h = T.relu(h @ encoder.w3 + encoder.b3)
    h = h @ encoder.w4 + encoder.b4                  # (n*k, d)
    h = h.reshape((n, k, d))
    return h.max(axis=1)                             # (n, d)


# ----------------------------------------------------------------------
# ASCII XYZ interchange


def write_xyz(path, points: np.ndarray, labels: np.ndarray | None = None) -> None:
    """One point per line, three %.17g reals, optional trailing integer label."""
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w") as fh:
        for i, (x, y, z) in enumerate(points):
            line = f"{x:.17g} {y:.17g} {z:.17g}"
            if labels is not None:
                line += f" {int(labels[i])}"
            fh.write(line + "\n")


def read_xyz(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read an ASCII XYZ file; '#' lines are comments.  Returns (points, labels)."""
    pts, labels = [], []
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise ValueError(f"malformed XYZ line: {line!r}")
            pts.append([float(parts[0]), float(parts[1]), float(parts[2])])
            if len(parts) == 4:
                labels.append(int(parts[3]))
    points = np.asarray(pts, dtype=np.float64)
    if labels and len(labels) != len(pts):
        raise ValueError("labels present on some lines but not all")
    return points, (np.asarray(labels, dtype=np.intp) if labels else None)
