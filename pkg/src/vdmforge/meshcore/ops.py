from __future__ import annotations

import warnings
from collections import defaultdict

import numpy as np
from numpy.typing import ArrayLike
from scipy import sparse

from ..errors import MeshError, NonManifoldError
from .mesh import BoundaryLoop, OrientedPointSet, TriMesh

MIN_SAMPLE_AREA = 1e-12


def edge_incidence(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges and the number of triangles using each."""
    und = np.sort(mesh.directed_edges, axis=1)
    edges, counts = np.unique(und, axis=0, return_counts=True)
    return edges, counts


def boundary_loops(mesh: TriMesh) -> list[BoundaryLoop]:
    """All boundary loops, each ordered along its triangles' half-edges.

    Raises :class:`NonManifoldError` when an edge has more than two incident
    triangles. Boundary vertices shared by two loops (pinches) are split so
    that every returned loop is simple.
    """
    edges, counts = edge_incidence(mesh)
    over = np.flatnonzero(counts > 2)
    if len(over):
        e = edges[over[0]]
        raise NonManifoldError((int(e[0]), int(e[1])), int(counts[over[0]]))
    single = edges[counts == 1]
    if not len(single):
        return []
    d = mesh.directed_edges
    und = np.sort(d, axis=1)
    # keep directed half-edges whose undirected edge is a boundary edge
    key_single = single[:, 0] * mesh.n_vertices + single[:, 1]
    key_all = und[:, 0] * mesh.n_vertices + und[:, 1]
    half = d[np.isin(key_all, key_single)]

    out: dict[int, list[int]] = defaultdict(list)
    for a, b in half.tolist():
        out[a].append(b)
    loops = []
    for start in sorted(out):
        while out[start]:
            path, where, cur = [start], {start: 0}, start
            while True:
                if not out[cur]:
                    raise MeshError(f"boundary chain breaks at vertex {cur} (inconsistent orientation?)")
                nxt = out[cur].pop(0)
                if nxt not in where:
                    where[nxt] = len(path)
                    path.append(nxt)
                    cur = nxt
                    continue
                k = where[nxt]
                loops.append(path[k:])
                if k == 0:
                    break
                for v in path[k + 1:]:
                    del where[v]
                path = path[: k + 1]
                cur = nxt
    return [BoundaryLoop(np.array(lp, dtype=np.int64), mesh) for lp in loops]


def vertex_adjacency_matrix(mesh: TriMesh) -> sparse.csr_matrix:
    e = mesh.edges
    n = mesh.n_vertices
    ones = np.ones(2 * len(e))
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sparse.csr_matrix((ones, (rows, cols)), shape=(n, n))


def sample_surface(mesh: TriMesh, n: int, seed: int) -> OrientedPointSet:
    """Area-weighted uniform surface samples with face normals.

    Random numbers come from numpy's ``Philox`` counter-based generator seeded
    with ``seed``; one ``(n, 3)`` block of uniforms is drawn, column 0 picks
    the triangle by inverse-CDF over cumulative areas and columns 1-2 place
    the point with the square-root barycentric map.
    """
    if n < 1:
        raise MeshError("sample count must be >= 1")
    areas = mesh.face_areas.copy()
    tiny = areas < MIN_SAMPLE_AREA
    if tiny.any():
        warnings.warn(f"skipping {int(tiny.sum())} triangles with area < {MIN_SAMPLE_AREA:g}", stacklevel=2)
        areas[tiny] = 0.0
    total = areas.sum()
    if not total > 0:
        raise MeshError("mesh has zero total area")
    rng = np.random.Generator(np.random.Philox(seed))
    u = rng.random((n, 3))
    cdf = np.cumsum(areas)
    tri = np.searchsorted(cdf, u[:, 0] * cdf[-1], side="right")
    # zero-weight triangles occupy empty cdf steps and are never selected,
    # except through the clip for a draw rounding up to the total
    tri = np.minimum(tri, np.flatnonzero(~tiny)[-1])
    r1 = np.sqrt(u[:, 1:2])
    r2 = u[:, 2:3]
    c = mesh.corners[tri]
    pts = (1 - r1) * c[:, 0] + r1 * (1 - r2) * c[:, 1] + r1 * r2 * c[:, 2]
    return OrientedPointSet(pts, mesh.face_normals[tri], check=False)


def laplacian_smooth(mesh: TriMesh, subset: ArrayLike, iterations: int = 3, lam: float = 0.5) -> TriMesh:
    """Move ``subset`` vertices toward their uniform neighbour average.

    Updates are simultaneous (Jacobi style): every iteration reads the
    positions of the previous one.
    """
    if not 0 < lam <= 1:
        raise MeshError("lambda must lie in (0, 1]")
    idx = np.unique(np.asarray(subset, dtype=np.int64))
    if len(idx) and (idx.min() < 0 or idx.max() >= mesh.n_vertices):
        raise MeshError("subset index out of range")
    adj = vertex_adjacency_matrix(mesh)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    isolated = idx[deg[idx] == 0]
    if len(isolated):
        warnings.warn(f"{len(isolated)} isolated vertices left unchanged: {isolated[:10].tolist()}", stacklevel=2)
    idx = idx[deg[idx] > 0]
    x = mesh.vertices.copy()
    rows = adj[idx]
    d = deg[idx][:, None]
    for _ in range(iterations):
        avg = (rows @ x) / d
        x[idx] = x[idx] + lam * (avg - x[idx])
    return mesh.replace(vertices=x)


def select_near_boundary(mesh: TriMesh, loop: BoundaryLoop | ArrayLike, rings: int) -> np.ndarray:
    """Sorted indices of vertices within ``rings`` edge hops of ``loop``."""
    seeds = loop.vertex_indices if isinstance(loop, BoundaryLoop) else np.asarray(loop, dtype=np.int64)
    adj = vertex_adjacency_matrix(mesh)
    mark = np.zeros(mesh.n_vertices, dtype=bool)
    mark[seeds] = True
    frontier = mark.copy()
    for _ in range(rings):
        reach = (adj @ frontier.astype(np.float64)) > 0
        frontier = reach & ~mark
        if not frontier.any():
            break
        mark |= frontier
    return np.flatnonzero(mark)
