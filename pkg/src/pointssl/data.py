"""Synthetic shape generators for pretraining and probe datasets.

Each cloud is sampled on a primitive surface (sphere, plane, box, cylinder),
perturbed with isotropic Gaussian noise, then normalized to zero mean and
unit maximum radius.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud

GENERATORS = ("sphere", "plane", "box", "cylinder")


@dataclass
class SyntheticShape:
    generator: str
    label: int
    cloud: PointCloud


def _sample_surface(generator: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if generator == "sphere":
        # antipodal pairs keep the empirical mean exactly zero, so the
        # normalization step preserves the unit radius of every point
        half = (n + 1) // 2
        v = rng.normal(size=(half, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return np.concatenate([v, -v])[:n]
    if generator == "plane":
        xy = rng.uniform(-1.0, 1.0, size=(n, 2))
        return np.column_stack([xy, np.zeros(n)])
    if generator == "box":
        # pick a face, then a uniform point on it
        face = rng.integers(6, size=n)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        for i in range(n):
            coords = [0.0, 0.0, 0.0]
            others = [a for a in range(3) if a != axis[i]]
            coords[axis[i]] = sign[i]
            coords[others[0]], coords[others[1]] = uv[i]
            pts[i] = coords
        return pts
    if generator == "cylinder":
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        z = rng.uniform(-1.0, 1.0, size=n)
        return np.column_stack([np.cos(theta), np.sin(theta), z])
    raise ValueError(f"unknown generator id {generator!r}")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random 3x3 rotation matrix (QR of a Gaussian, sign-fixed)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Zero mean, maximum radius exactly 1."""
    centered = points - points.mean(axis=0, keepdims=True)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius == 0.0:
        return centered
    return centered / radius


def make_shape(generator: str, n_points: int, sigma: float, label: int,
               rng: np.random.Generator, rotate: bool = False) -> SyntheticShape:
    pts = _sample_surface(generator, n_points, rng)
    if sigma > 0:
        pts = pts + rng.normal(0.0, sigma, size=pts.shape)
    if rotate:
        # random pose removes the fixed canonical orientation of the
        # primitives, so class identity cannot be read off single axes
        pts = pts @ random_rotation(rng).T
    pts = normalize_cloud(pts)
    return SyntheticShape(generator=generator, label=label,
                          cloud=PointCloud(points=pts, label=label))


def generate_dataset(spec: list[tuple[str, int]], n_points: int, sigma: float,
                     seed: int, rotate: bool = False) -> list[SyntheticShape]:
    """Deterministic dataset; labels are assigned by generator order in `spec`."""
    for generator, count in spec:
        if generator not in GENERATORS:
            raise ValueError(f"unknown generator id {generator!r}")
        if count <= 0:
            raise ValueError(f"count for {generator!r} must be positive, got {count}")
    rng = np.random.default_rng(seed)
    shapes: list[SyntheticShape] = []
    for label, (generator, count) in enumerate(spec):
        for _ in range(count):
            shapes.append(make_shape(generator, n_points, sigma, label, rng,
                                     rotate=rotate))
    return shapes
