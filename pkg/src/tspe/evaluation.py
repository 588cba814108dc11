"""Point-cloud metrics and mesh sampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, InsufficientDataError
from .fusion import TriangleMesh

STRATEGIES = ("peak", "median", "expected")


def _cloud(points, name: str) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise InsufficientDataError(f"{name} point cloud is empty")
    return pts


def nearest_distances(query, reference) -> np.ndarray:
    return cKDTree(_cloud(reference, "reference")).query(_cloud(query, "query"), k=1)[0]


def chamfer(a, b) -> float:
    """Symmetric mean nearest-neighbour distance, ``(mean_a + mean_b) / 2``."""
    return 0.5 * float(nearest_distances(a, b).mean() + nearest_distances(b, a).mean())


def precision(cloud, truth, tau: float) -> float:
    if not tau > 0:
        raise DomainError("precision threshold must be positive")
    return float(np.mean(nearest_distances(cloud, truth) <= tau))


def sample_mesh(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if len(mesh) == 0:
        raise InsufficientDataError("mesh has no faces")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise InsufficientDataError("mesh has zero area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[face]]
    return ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
            + (r1 * r2)[:, None] * tri[:, 2])


def split_by_layer(points, truth: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Assign each point to the ground-truth layer it lies closest to."""
    names = list(truth)
    dist = np.stack([nearest_distances(points, truth[k]) for k in names])
    owner = np.argmin(dist, axis=0)
    return {k: points[owner == i] for i, k in enumerate(names)}


@dataclass
class MetricReport:
    strategy: str
    layer: str
    chamfer: float
    precision: float | None
    points: int
    truth_points: int

    def as_dict(self) -> dict:
        return asdict(self)
