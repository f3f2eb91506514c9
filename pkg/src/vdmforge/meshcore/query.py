"""Closest-point queries against triangles."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriMesh


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest points on triangles (a, b, c) to points p, all arrays (N, 3).

    Region-based evaluation after Ericson, "Real-Time Collision Detection" 5.1.5.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, value):
        nonlocal done
        m = mask & ~done
        if m.any():
            out[m] = value(m)
            done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), lambda m: a[m])
        put((d3 >= 0) & (d4 <= d3), lambda m: b[m])
        put((d6 >= 0) & (d5 <= d6), lambda m: c[m])
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0),
            lambda m: a[m] + (d1[m] / (d1[m] - d3[m]))[:, None] * ab[m])
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0),
            lambda m: a[m] + (d2[m] / (d2[m] - d6[m]))[:, None] * ac[m])
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
            lambda m: b[m] + ((d4[m] - d3[m]) / ((d4[m] - d3[m]) + (d5[m] - d6[m])))[:, None] * (c[m] - b[m]))
        rest = ~done
        if rest.any():
            denom = 1.0 / (va[rest] + vb[rest] + vc[rest])
            v = vb[rest] * denom
            w = vc[rest] * denom
            out[rest] = a[rest] + ab[rest] * v[:, None] + ac[rest] * w[:, None]
    return out


def point_triangle_sq_distance(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Squared distance from every point (N, 3) to every triangle (T, 3, 3) -> (N, T)."""
    n, t = len(p), len(tri)
    pp = np.repeat(p, t, axis=0)
    a = np.tile(tri[:, 0], (n, 1))
    b = np.tile(tri[:, 1], (n, 1))
    c = np.tile(tri[:, 2], (n, 1))
    q = closest_point_on_triangles(pp, a, b, c)
    return ((pp - q) ** 2).sum(1).reshape(n, t)


class TriangleLocator:
    """Approximate nearest-surface queries via a k-d tree on triangle centroids.

    The ``k`` triangles with nearest centroids are tested exactly, so the
    returned distance is never smaller than the true point-to-mesh distance.
    """

    def __init__(self, mesh: TriMesh, k: int = 12):
        self.mesh = mesh
        self.corners = mesh.corners
        self.k = min(k, mesh.n_triangles)
        self.tree = cKDTree(self.corners.mean(axis=1))

    def query(self, points: np.ndarray, chunk: int = 20000) -> tuple[np.ndarray, np.ndarray]:
        """Squared distances and triangle ids of the closest candidate triangles."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        best = np.empty(len(points))
        which = np.empty(len(points), dtype=np.int64)
        for s in range(0, len(points), chunk):
            p = points[s:s + chunk]
            _, cand = self.tree.query(p, k=self.k)
            cand = cand.reshape(len(p), -1)
            tri = self.corners[cand.ravel()]
            pp = np.repeat(p, cand.shape[1], axis=0)
            q = closest_point_on_triangles(pp, tri[:, 0], tri[:, 1], tri[:, 2])
            d = ((pp - q) ** 2).sum(1).reshape(len(p), -1)
            j = d.argmin(axis=1)
            best[s:s + chunk] = d[np.arange(len(p)), j]
            which[s:s + chunk] = cand[np.arange(len(p)), j]
        return best, which
