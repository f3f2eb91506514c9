"""Analytic test surfaces shared by the tests, the CLI and the self-test."""

from __future__ import annotations

import numpy as np

from .meshcore import OrientedPointSet, TriMesh, sample_surface
from .meshcore.primitives import grid_triangles

BUMP_HEIGHT = 0.2
BUMP_SHARPNESS = 50.0


def bump_height(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """z = 0.2 exp(-50 ((u - 0.5)^2 + (v - 0.5)^2))."""
    return BUMP_HEIGHT * np.exp(-BUMP_SHARPNESS * ((u - 0.5) ** 2 + (v - 0.5) ** 2))


def height_field_mesh(height, n: int = 256) -> TriMesh:
    """Triangulated z = height(u, v) over the unit square, (n+1)^2 vertices with UVs."""
    s = np.linspace(0.0, 1.0, n + 1)
    u, v = np.meshgrid(s, s, indexing="xy")
    u, v = u.ravel(), v.ravel()
    return TriMesh(np.column_stack([u, v, height(u, v)]), grid_triangles(n + 1, n + 1), uvs=np.column_stack([u, v]))


def bump_mesh(n: int = 256) -> TriMesh:
    return height_field_mesh(bump_height, n)


def flat_square(n: int = 1) -> TriMesh:
    return height_field_mesh(lambda u, v: np.zeros_like(u), n)


def bump_points(count: int = 100_000, seed: int = 0, n: int = 256) -> OrientedPointSet:
    return sample_surface(bump_mesh(n), count, seed)
