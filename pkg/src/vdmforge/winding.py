"""Generalized winding numbers and interior-point filtering.

Exact mode sums van Oosterom-Strackee solid angles over every triangle.

Tree mode walks a triangle BVH. A node with total area ``A``, area-weighted
centre ``c`` and bounding radius ``r`` is replaced by its second-order
far-field expansion (dipole, first and second moments of the surface about
``c``) only when the query lies at distance ``d > r`` and the Taylor
remainder bound

    4 * A * r^3 / (d - r)^5  <=  4 * pi * eps * A / A_mesh

holds. The left side bounds the solid-angle error of the expansion (the
fourth derivative of ``1/|x|`` is bounded by ``24 / |x|^5``), the right side
is the node's area share of the error budget. Nodes used for one query are
disjoint, so the total winding-number error is below ``eps``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from .bvh import TriangleBVH, build_bvh
from .errors import OnSurfaceError
from .meshcore import OrientedPointSet, TriMesh
from .meshcore.query import closest_point_on_triangles

ON_SURFACE_TOL = 1e-9
_PAIR_BUDGET = 2_000_000
_FOUR_PI = 4.0 * np.pi


def solid_angles(q: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Signed solid angles (Nq, T) subtended by triangles at query points."""
    a = corners[None, :, 0, :] - q[:, None, :]
    b = corners[None, :, 1, :] - q[:, None, :]
    c = corners[None, :, 2, :] - q[:, None, :]
    la = np.sqrt((a * a).sum(-1))
    lb = np.sqrt((b * b).sum(-1))
    lc = np.sqrt((c * c).sum(-1))
    det = (a * np.cross(b, c)).sum(-1)
    den = la * lb * lc + (a * b).sum(-1) * lc + (b * c).sum(-1) * la + (c * a).sum(-1) * lb
    return 2.0 * np.arctan2(det, den)


def _check_on_surface(q: np.ndarray, corners: np.ndarray, tri_ids: np.ndarray, q_ids: np.ndarray) -> None:
    """Raise if any query lies within ON_SURFACE_TOL of a triangle.

    Only pairs whose plane distance is below the tolerance are tested exactly.
    """
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]
    nrm = np.cross(e1, e2)
    ln = np.linalg.norm(nrm, axis=1)
    h = np.abs(np.einsum("ntk,tk->nt", q[:, None, :] - corners[None, :, 0, :], nrm))
    close = h <= ON_SURFACE_TOL * np.maximum(ln, 1e-300)[None, :]
    close |= (ln == 0)[None, :]
    qi, ti = np.nonzero(close)
    if not len(qi):
        return
    cp = closest_point_on_triangles(q[qi], corners[ti, 0], corners[ti, 1], corners[ti, 2])
    d = np.linalg.norm(q[qi] - cp, axis=1)
    hit = np.flatnonzero(d <= ON_SURFACE_TOL)
    if len(hit):
        k = hit[0]
        raise OnSurfaceError(int(q_ids[qi[k]]), int(tri_ids[ti[k]]), float(d[k]))


def _exact(q: np.ndarray, corners: np.ndarray, q_ids: np.ndarray, tri_ids: np.ndarray) -> np.ndarray:
    out = np.zeros(len(q))
    step_q = max(1, _PAIR_BUDGET // max(len(corners), 1))
    for s in range(0, len(q), step_q):
        qq = q[s:s + step_q]
        _check_on_surface(qq, corners, tri_ids, q_ids[s:s + step_q])
        out[s:s + step_q] = solid_angles(qq, corners).sum(axis=1)
    return out


def winding_number_exact(mesh: TriMesh, points: ArrayLike) -> np.ndarray | float:
    q = np.asarray(points, dtype=np.float64)
    single = q.ndim == 1
    q = q.reshape(-1, 3)
    w = _exact(q, mesh.corners, np.arange(len(q)), np.arange(mesh.n_triangles)) / _FOUR_PI
    return float(w[0]) if single else w


def _triangle_second_moments(corners: np.ndarray, origin: np.ndarray) -> np.ndarray:
    """(T, 3, 3) integrals of (x - origin)(x - origin)^T over each triangle."""
    v = corners - origin
    s = v.sum(axis=1)
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    outer = np.einsum("tki,tkj->tij", v, v) + np.einsum("ti,tj->tij", s, s)
    return outer * (area / 12.0)[:, None, None]


@dataclass
class WindingTree:
    """BVH with per-node far-field moments for fast winding numbers."""

    mesh: TriMesh
    bvh: TriangleBVH
    center: np.ndarray   # (nodes, 3) area-weighted centroid
    radius: np.ndarray   # (nodes,) max distance from centre to any node vertex
    area: np.ndarray     # (nodes,)
    dipole: np.ndarray   # (nodes, 3) sum of a_i n_i
    moment1: np.ndarray  # (nodes, 3, 3) sum of a_i (c_i - center) (x) n_i
    moment2: np.ndarray  # (nodes, 3, 3, 3) sum of n_i (x) int (x - center)(x - center)^T
    tol: float = 1e-4

    @classmethod
    def build(cls, mesh: TriMesh, tol: float = 1e-4, leaf_size: int = 8) -> "WindingTree":
        corners = mesh.corners
        bvh = build_bvh(corners, leaf_size)
        area_n = 0.5 * mesh.face_cross
        area = mesh.face_areas
        unit_n = area_n / np.maximum(area, 1e-300)[:, None]
        cen = corners.mean(axis=1)
        nn = bvh.n_nodes
        center = np.zeros((nn, 3))
        radius = np.zeros(nn)
        node_area = np.zeros(nn)
        dipole = np.zeros((nn, 3))
        m1 = np.zeros((nn, 3, 3))
        m2 = np.zeros((nn, 3, 3, 3))
        # children are created after their parent, so a reverse sweep sees them first
        first = np.zeros(nn, dtype=np.int64)
        size = np.zeros(nn, dtype=np.int64)
        for node in range(nn - 1, -1, -1):
            if bvh.left[node] < 0:
                first[node], size[node] = bvh.start[node], bvh.count[node]
            else:
                l, r = bvh.left[node], bvh.right[node]
                first[node], size[node] = first[l], size[l] + size[r]
        for node in range(nn):
            ids = bvh.order[first[node]:first[node] + size[node]]
            a = area[ids]
            tot = a.sum()
            c = (cen[ids] * a[:, None]).sum(0) / tot if tot > 0 else cen[ids].mean(0)
            center[node] = c
            radius[node] = np.sqrt(((corners[ids] - c) ** 2).sum(-1).max())
            node_area[node] = tot
            dipole[node] = area_n[ids].sum(0)
            m1[node] = np.einsum("ik,ij->kj", cen[ids] - c, area_n[ids])
            m2[node] = np.einsum("ij,ikl->jkl", unit_n[ids], _triangle_second_moments(corners[ids], c))
        return cls(mesh, bvh, center, radius, node_area, dipole, m1, m2, tol)

    def far_field(self, node: int, q: np.ndarray) -> np.ndarray:
        """Second-order expansion of the node's solid angle at queries ``q``."""
        d = self.center[node] - q
        d2 = (d * d).sum(1)
        inv = 1.0 / np.sqrt(d2)
        inv3 = inv ** 3
        inv5 = inv3 * inv * inv
        m1 = self.moment1[node]
        m2 = self.moment2[node]
        t0 = (d @ self.dipole[node]) * inv3
        t1 = np.trace(m1) * inv3 - 3.0 * np.einsum("ni,ij,nj->n", d, m1, d) * inv5
        cubic = np.einsum("jkl,nj,nk,nl->n", m2, d, d, d)
        lin = 2.0 * np.einsum("jjl,nl->n", m2, d) + np.einsum("jkk,nj->n", m2, d)
        t2 = 0.5 * (15.0 * cubic * inv5 * inv * inv - 3.0 * lin * inv5)
        return t0 + t1 + t2

    def __call__(self, points: ArrayLike) -> np.ndarray | float:
        q = np.asarray(points, dtype=np.float64)
        single = q.ndim == 1
        q = q.reshape(-1, 3)
        out = np.zeros(len(q))
        corners = self.mesh.corners
        bvh = self.bvh
        # per-unit-area solid-angle budget, half the tolerance to leave room for rounding
        budget = 4.0 * np.pi * 0.5 * self.tol / max(float(self.area[0]), 1e-300)
        stack = [(0, np.arange(len(q)))]
        while stack:
            node, idx = stack.pop()
            leaf = bvh.left[node] < 0
            if not leaf:
                r = self.radius[node]
                d = np.sqrt(((self.center[node] - q[idx]) ** 2).sum(1))
                gap = np.maximum(d - r, 0.0)
                far = (gap > 0) & (4.0 * r ** 3 <= budget * gap ** 5)
                if far.any():
                    out[idx[far]] += self.far_field(node, q[idx[far]])
                idx = idx[~far]
                if len(idx):
                    stack.append((bvh.right[node], idx))
                    stack.append((bvh.left[node], idx))
                continue
            tri = bvh.leaf_triangles(node)
            c = corners[tri]
            _check_on_surface(q[idx], c, tri, idx)
            omega = solid_angles(q[idx], c)
            acc = out[idx]
            for k in range(omega.shape[1]):
                acc += omega[:, k]
            out[idx] = acc
        out /= _FOUR_PI
        return float(out[0]) if single else out


def winding_number(mesh: TriMesh, q: ArrayLike, *, accelerated: bool = False, tol: float = 1e-4):
    """Generalized winding number of ``mesh`` at ``q`` (a point or an (N, 3) array).

    With ``accelerated`` the result is within ``tol`` of the exact sum.
    Raises :class:`OnSurfaceError` for queries within 1e-9 of a triangle.
    """
    if accelerated:
        return WindingTree.build(mesh, tol)(q)
    return winding_number_exact(mesh, q)


def filter_interior(points: OrientedPointSet, mesh: TriMesh, threshold: float = 0.5, *, accelerated: bool = True) -> OrientedPointSet:
    """Keep the points with ``|w| < threshold``, preserving order."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    w = winding_number(mesh, points.points, accelerated=accelerated)
    return points.subset(np.abs(np.atleast_1d(w)) < threshold)
