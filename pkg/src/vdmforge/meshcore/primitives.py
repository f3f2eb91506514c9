"""Procedural test shapes: all closed shapes are outward oriented."""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh


def box(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriMesh:
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    corners = np.array([[(hi if (i >> k) & 1 else lo)[k] for k in range(3)] for i in range(8)])
    # corner index bits: x=1, y=2, z=4
    quads = [
        (0, 2, 3, 1),  # z-
        (4, 5, 7, 6),  # z+
        (0, 1, 5, 4),  # y-
        (2, 6, 7, 3),  # y+
        (0, 4, 6, 2),  # x-
        (1, 3, 7, 5),  # x+
    ]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriMesh(corners, tris)


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Subdivided icosahedron with exact unit normals stored per vertex."""
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
         (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = np.array(v, float)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(f, np.int64)
    for _ in range(subdivisions):
        e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        inv = inv.reshape(3, -1).T + len(verts)
        mid = verts[uniq[:, 0]] + verts[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        verts = np.concatenate([verts, mid])
        a, b, c = faces.T
        ab, bc, ca = inv.T
        faces = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
    normals = verts.copy()
    return TriMesh(verts * radius + np.asarray(center, float), faces, normals=normals)


def torus(major: float = 1.0, minor: float = 0.35, n_major: int = 48, n_minor: int = 24) -> TriMesh:
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    u = 2 * np.pi * i / n_major
    w = 2 * np.pi * j / n_minor
    x = (major + minor * np.cos(w)) * np.cos(u)
    y = (major + minor * np.cos(w)) * np.sin(u)
    z = minor * np.sin(w)
    verts = np.stack([x, y, z], -1).reshape(-1, 3)

    def vid(a, b):
        return (a % n_major) * n_minor + (b % n_minor)

    tris = []
    for a in range(n_major):
        for b in range(n_minor):
            p, q, r, s = vid(a, b), vid(a + 1, b), vid(a + 1, b + 1), vid(a, b + 1)
            tris += [(p, q, r), (p, r, s)]
    return TriMesh(verts, tris)


def grid(n: int, size: float = 1.0, origin=(0.0, 0.0), z: float = 0.0) -> TriMesh:
    """(n+1)^2-vertex planar grid of n^2 quads facing +z, with identity UVs."""
    s = np.linspace(0.0, 1.0, n + 1)
    u, v = np.meshgrid(s, s, indexing="xy")
    uv = np.stack([u.ravel(), v.ravel()], 1)
    verts = np.column_stack([origin[0] + size * uv[:, 0], origin[1] + size * uv[:, 1], np.full(len(uv), z)])
    return TriMesh(verts, grid_triangles(n + 1, n + 1), uvs=uv)


def grid_triangles(nx: int, ny: int) -> np.ndarray:
    """Counter-clockwise triangles of an ``nx`` by ``ny`` row-major vertex lattice."""
    i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="xy")
    a = (j * nx + i).ravel()
    b, c, d = a + 1, a + nx + 1, a + nx
    return np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])


def cylinder_patch(radius: float = 1.0, angle: float = np.pi, height: float = 1.0, nu: int = 32, nv: int = 16) -> TriMesh:
    """Open cylinder section around +z with UVs wrapping the angle and exact radial normals."""
    u = np.linspace(0.0, 1.0, nu + 1)
    v = np.linspace(0.0, 1.0, nv + 1)
    uu, vv = np.meshgrid(u, v, indexing="xy")
    th = (uu.ravel() - 0.5) * angle
    verts = np.column_stack([radius * np.sin(th), height * vv.ravel(), radius * np.cos(th)])
    normals = np.column_stack([np.sin(th), np.zeros_like(th), np.cos(th)])
    return TriMesh(verts, grid_triangles(nu + 1, nv + 1), uvs=np.column_stack([uu.ravel(), vv.ravel()]), normals=normals)


def disk(radius: float = 1.0, rings: int = 8, segments: int = 32, center=(0.0, 0.0, 0.0), height=None) -> TriMesh:
    """Polar disk facing +z; ``height(x, y)`` optionally lifts vertices off the plane."""
    verts = [(0.0, 0.0)]
    for k in range(1, rings + 1):
        th = 2 * np.pi * np.arange(segments) / segments
        verts += list(zip(radius * k / rings * np.cos(th), radius * k / rings * np.sin(th)))
    xy = np.array(verts)
    tris = [(0, 1 + s, 1 + (s + 1) % segments) for s in range(segments)]
    for k in range(1, rings):
        a0, b0 = 1 + (k - 1) * segments, 1 + k * segments
        for s in range(segments):
            s1 = (s + 1) % segments
            tris += [(a0 + s, b0 + s, b0 + s1), (a0 + s, b0 + s1, a0 + s1)]
    z = np.zeros(len(xy)) if height is None else np.asarray(height(xy[:, 0], xy[:, 1]), float)
    return TriMesh(np.column_stack([xy, z]) + np.asarray(center, float), tris)
