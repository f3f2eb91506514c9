"""Turn an extracted part into a plane-attachable patch.

Steps: fit the boundary plane, project the boundary onto it, deform the rest
of the part so edge difference vectors change as little as possible, place
the result on a square tile, and optionally augment it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import LinearOperator, cg

from .errors import FlattenError, SolverError
from .meshcore import BoundaryLoop, TriMesh, boundary_loops, laplacian_smooth, select_near_boundary, vertex_adjacency_matrix
from .meshcore.primitives import grid_triangles


def orthonormal_frame(normal: ArrayLike) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-handed (t, b, n) with t chosen from the axis least aligned with n."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    t = axis - n * (axis @ n)
    t /= np.linalg.norm(t)
    b = np.cross(n, t)
    return t, b, n


@dataclass(frozen=True)
class Plane:
    """Oriented plane {x : n.x = d} with an in-plane tangent frame (t, b)."""

    normal: np.ndarray
    offset: float
    tangent: np.ndarray
    bitangent: np.ndarray

    @classmethod
    def from_point_normal(cls, point: ArrayLike, normal: ArrayLike, tangent: ArrayLike | None = None) -> "Plane":
        t, b, n = orthonormal_frame(normal)
        if tangent is not None:
            t = np.asarray(tangent, float) - n * (np.asarray(tangent, float) @ n)
            if np.linalg.norm(t) < 1e-12:
                raise FlattenError("tangent is parallel to the normal")
            t /= np.linalg.norm(t)
            b = np.cross(n, t)
        return cls(n, float(n @ np.asarray(point, float)), t, b)

    @classmethod
    def xy(cls, z: float = 0.0) -> "Plane":
        return cls(np.array([0.0, 0.0, 1.0]), float(z), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))

    @property
    def origin(self) -> np.ndarray:
        """Point of the plane closest to the world origin."""
        return self.normal * self.offset

    @property
    def frame(self) -> np.ndarray:
        """3x3 matrix with rows t, b, n."""
        return np.stack([self.tangent, self.bitangent, self.normal])

    def signed_distance(self, x: ArrayLike) -> np.ndarray:
        return np.asarray(x, float) @ self.normal - self.offset

    def to_local(self, x: ArrayLike, origin: ArrayLike | None = None) -> np.ndarray:
        o = self.origin if origin is None else np.asarray(origin, float)
        return (np.asarray(x, float) - o) @ self.frame.T

    def from_local(self, local: ArrayLike, origin: ArrayLike | None = None) -> np.ndarray:
        o = self.origin if origin is None else np.asarray(origin, float)
        return np.asarray(local, float) @ self.frame + o


def fit_plane(points: ArrayLike, reference: ArrayLike | None = None) -> Plane:
    """Least-squares plane through the centroid of ``points``.

    The normal is the covariance eigenvector of the smallest eigenvalue. Its
    sign puts ``reference`` (typically the part's mean vertex) on the +n side;
    without a reference the largest normal component is made positive.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) < 3:
        raise FlattenError(f"plane fit needs at least 3 points, got {len(p)}")
    c = p.mean(0)
    x = p - c
    w, v = np.linalg.eigh(x.T @ x)
    if not w[2] > 0 or w[1] <= 1e-12 * w[2]:
        raise FlattenError("points are collinear or coincident; plane is undefined")
    n = v[:, 0]
    side = None if reference is None else float((np.asarray(reference, float) - c) @ n)
    if side is not None and side != 0.0:
        n = n if side > 0 else -n
    elif n[np.argmax(np.abs(n))] < 0:
        n = -n
    return Plane.from_point_normal(c, n)


@dataclass(frozen=True, eq=False)
class PartPatch:
    """A part mesh split into its outer boundary loop B and the remaining vertices A."""

    mesh: TriMesh
    boundary: BoundaryLoop
    interior: np.ndarray

    @property
    def edges(self) -> np.ndarray:
        return self.mesh.edges


def build_patch(mesh: TriMesh) -> PartPatch:
    """Use the longest boundary loop as B; vertices of any other hole stay free."""
    loops = boundary_loops(mesh)
    if not loops:
        raise FlattenError("part has no boundary loop")
    b = max(loops, key=len)
    interior = np.setdiff1d(np.arange(mesh.n_vertices), b.vertex_indices)
    return PartPatch(mesh, b, interior)


def project_boundary(patch: PartPatch, plane: Plane) -> np.ndarray:
    b = patch.boundary.positions
    return b - np.outer(plane.signed_distance(b), plane.normal)


def graph_laplacian(mesh: TriMesh) -> sparse.csr_matrix:
    """Unit-weight graph Laplacian D - W over mesh edges."""
    w = vertex_adjacency_matrix(mesh)
    deg = np.asarray(w.sum(axis=1)).ravel()
    return (sparse.diags(deg) - w).tocsr()


def deformation_energy(patch: PartPatch, vertices: ArrayLike) -> float:
    """Sum over edges of |(p' - q') - (p - q)|^2."""
    e = patch.edges
    x = np.asarray(vertices, float)
    d = (x[e[:, 0]] - x[e[:, 1]]) - (patch.mesh.vertices[e[:, 0]] - patch.mesh.vertices[e[:, 1]])
    return float((d * d).sum())


def deform_to_boundary(patch: PartPatch, boundary_positions: ArrayLike, *, rtol: float = 1e-10) -> TriMesh:
    """Move B to ``boundary_positions`` and A to the edge-difference-preserving minimiser.

    Setting the gradient of the energy to zero gives ``L_AA A' = (L X)_A - L_AB B'``
    for the unit-weight Laplacian ``L``. It is solved for the displacement
    ``A' - A`` (right-hand side ``-L_AB (B' - B)``) by Jacobi-preconditioned
    conjugate gradients, one coordinate at a time, so that identity and
    translated boundaries are reproduced to rounding.
    """
    mesh = patch.mesh
    bidx = patch.boundary.vertex_indices
    bnew = np.asarray(boundary_positions, dtype=np.float64).reshape(-1, 3)
    if len(bnew) != len(bidx):
        raise FlattenError(f"expected {len(bidx)} boundary positions, got {len(bnew)}")
    x = mesh.vertices.copy()
    x[bidx] = bnew
    a = patch.interior
    if not len(a):
        return mesh.replace(vertices=x)
    lap = graph_laplacian(mesh)
    _check_anchored(lap, bidx, mesh.n_vertices)
    l_aa = lap[a][:, a].tocsr()
    l_ab = lap[a][:, bidx].tocsr()
    rhs = -(l_ab @ (bnew - mesh.vertices[bidx]))
    full_rhs = lap[a] @ mesh.vertices - l_ab @ bnew
    inv_diag = 1.0 / l_aa.diagonal()
    precond = LinearOperator(l_aa.shape, matvec=lambda r: inv_diag * r.ravel(), dtype=np.float64)
    delta = np.zeros((len(a), 3))
    for k in range(3):
        if not rhs[:, k].any():
            continue
        sol, info = cg(l_aa, rhs[:, k], rtol=rtol, atol=0.0, maxiter=10 * len(a), M=precond)
        if info != 0:
            raise SolverError(f"conjugate gradients did not converge on coordinate {k} (info={info})")
        delta[:, k] = sol
    x[a] = mesh.vertices[a] + delta
    res = np.abs(l_aa @ x[a] - full_rhs).max()
    scale = max(np.abs(full_rhs).max(), np.abs(l_aa.diagonal()).max() * np.abs(x[a]).max(), 1e-300)
    if res > 1e-8 * scale:
        raise SolverError(f"deformation residual {res:.3g} exceeds 1e-8 relative")
    return mesh.replace(vertices=x)


def _check_anchored(lap: sparse.csr_matrix, bidx: np.ndarray, n: int) -> None:
    ncomp, label = connected_components(lap, directed=False)
    anchored = np.zeros(ncomp, dtype=bool)
    anchored[label[bidx]] = True
    if not anchored.all():
        free = np.flatnonzero(~anchored[label])
        raise FlattenError(f"{len(free)} vertices are not connected to the boundary (e.g. vertex {int(free[0])})")


def flatten_part(mesh: TriMesh) -> tuple[TriMesh, Plane]:
    """Fit the boundary plane, project B onto it and deform the rest of the part."""
    patch = build_patch(mesh)
    plane = fit_plane(patch.boundary.positions, reference=mesh.vertices.mean(0))
    return deform_to_boundary(patch, project_boundary(patch, plane)), plane


# -- stitching ----------------------------------------------------------------


def _polygon_area(p: np.ndarray) -> float:
    q = np.roll(p, -1, axis=0)
    return 0.5 * float((p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]).sum())


def _segments_cross(p1, p2, q1, q2) -> np.ndarray:
    """Proper or touching intersection between segment arrays (broadcast)."""

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return (d1 * d2 <= 0) & (d3 * d4 <= 0) & ~((d1 == 0) & (d2 == 0) & (d3 == 0) & (d4 == 0))


def _self_intersects(poly: np.ndarray, chunk: int = 512) -> bool:
    n = len(poly)
    a, b = poly, np.roll(poly, -1, axis=0)
    idx = np.arange(n)
    for s in range(0, n, chunk):
        i = idx[s:s + chunk, None]
        hit = _segments_cross(a[s:s + chunk, None], b[s:s + chunk, None], a[None], b[None])
        # adjacent edges share an endpoint
        adjacent = (np.abs(i - idx[None]) <= 1) | (np.abs(i - idx[None]) == n - 1)
        if (hit & ~adjacent).any():
            return True
    return False


def _points_in_polygon(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule."""
    a, b = poly, np.roll(poly, -1, axis=0)
    inside = np.zeros(len(pts), dtype=bool)
    for s in range(0, len(pts), 4096):
        p = pts[s:s + 4096, None, :]
        cond = (a[None, :, 1] > p[..., 1]) != (b[None, :, 1] > p[..., 1])
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = a[None, :, 0] + (p[..., 1] - a[None, :, 1]) * (b[None, :, 0] - a[None, :, 0]) / (b[None, :, 1] - a[None, :, 1])
        inside[s:s + 4096] = (cond & (p[..., 0] < xc)).sum(1) % 2 == 1
    return inside


def _quads_hit_polygon(lo: np.ndarray, hi: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Closed boxes [lo, hi] (Q, 2) that overlap the closed polygon."""
    corners = np.stack([lo, np.stack([hi[:, 0], lo[:, 1]], 1), hi, np.stack([lo[:, 0], hi[:, 1]], 1)], 1)
    hit = _points_in_polygon(corners.reshape(-1, 2), poly).reshape(-1, 4).any(1)
    hit |= _points_in_polygon(0.5 * (lo + hi), poly)
    a, b = poly, np.roll(poly, -1, axis=0)
    for s in range(0, len(lo), 1024):
        l, h = lo[s:s + 1024, None, :], hi[s:s + 1024, None, :]
        # polygon vertex inside the box
        v_in = ((a[None] >= l) & (a[None] <= h)).all(2).any(1)
        # polygon edge crossing a box edge
        c = corners[s:s + 1024]
        cross = np.zeros(len(c), dtype=bool)
        for k in range(4):
            cross |= _segments_cross(c[:, None, k], c[:, None, (k + 1) % 4], a[None], b[None]).any(1)
        hit[s:s + 1024] |= v_in | cross
    return hit


def _clean_hole(removed: np.ndarray) -> np.ndarray:
    """Grow the removed-quad mask until its complement is one edge-connected band with no pinches."""
    n = removed.shape[0]
    while True:
        changed = False
        # kept quads cut off from the outer ring become part of the hole
        keep = ~removed
        reach = np.zeros_like(keep)
        reach[0, :], reach[-1, :], reach[:, 0], reach[:, -1] = keep[0, :], keep[-1, :], keep[:, 0], keep[:, -1]
        while True:
            grown = reach.copy()
            grown[1:] |= reach[:-1]
            grown[:-1] |= reach[1:]
            grown[:, 1:] |= reach[:, :-1]
            grown[:, :-1] |= reach[:, 1:]
            grown &= keep
            if (grown == reach).all():
                break
            reach = grown
        island = keep & ~reach
        if island.any():
            removed = removed | island
            changed = True
        # a grid vertex whose four quads alternate removed/kept diagonally is a pinch
        q00, q10, q01, q11 = removed[:-1, :-1], removed[:-1, 1:], removed[1:, :-1], removed[1:, 1:]
        pinch = ((q00 & q11 & ~q10 & ~q01) | (q10 & q01 & ~q00 & ~q11))
        if pinch.any():
            fix = np.zeros_like(removed)
            pj, pi = np.nonzero(pinch)
            fix[pj, pi] = fix[pj, pi + 1] = fix[pj + 1, pi] = fix[pj + 1, pi + 1] = True
            removed = removed | fix
            changed = True
        if not changed:
            return removed


def _zipper(hole: np.ndarray, part: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Triangulate the band between two counter-clockwise loops by greedy shortest diagonals.

    ``hole`` is the outer loop, ``part`` the inner one. Emits exactly
    ``len(hole) + len(part)`` triangles, oriented counter-clockwise.
    """
    nh, npart = len(hole), len(part)
    d0 = np.linalg.norm(pos[part] - pos[hole[0]], axis=1)
    shift = int(np.argmin(d0))
    part = np.roll(part, -shift)
    i = j = 0
    tris = []
    while i < nh or j < npart:
        h0, h1 = hole[i % nh], hole[(i + 1) % nh]
        p0, p1 = part[j % npart], part[(j + 1) % npart]
        if j == npart or (i < nh and np.linalg.norm(pos[h1] - pos[p0]) <= np.linalg.norm(pos[h0] - pos[p1])):
            tris.append((h0, h1, p0))
            i += 1
        else:
            tris.append((p1, p0, h0))
            j += 1
    return np.array(tris, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class StitchResult:
    mesh: TriMesh
    hole_loop: np.ndarray
    part_loop: np.ndarray
    plane: Plane
    center: np.ndarray

    @property
    def seam(self) -> np.ndarray:
        return np.concatenate([self.hole_loop, self.part_loop])


def stitch_to_square(
    part: TriMesh,
    tile_resolution: int = 64,
    margin: float = 0.05,
    *,
    center: ArrayLike | None = None,
    plane: Plane | None = None,
    return_seam: bool = False,
):
    """Embed a flattened part in a unit square tile on its boundary plane.

    The tile has ``tile_resolution`` quads per side and is centred at
    ``center`` (default: the boundary centroid). Grid quads that overlap the
    part's boundary polygon are removed, the hole is cleaned to a single
    simple loop, and the band between the hole and the part boundary is
    zippered. Output vertices carry tile UVs in [0, 1]^2.
    """
    if tile_resolution < 2:
        raise FlattenError("tile_resolution must be >= 2")
    if not 0 <= margin < 0.5:
        raise FlattenError("margin must lie in [0, 0.5)")
    patch = build_patch(part)
    bpos = patch.boundary.positions
    if plane is None:
        plane = fit_plane(bpos, reference=part.vertices.mean(0))
    off = np.abs(plane.signed_distance(bpos)).max()
    if off > 1e-6:
        raise FlattenError(f"part boundary is not planar (max offset {off:.3g})")
    c3 = bpos.mean(0) if center is None else np.asarray(center, float)
    c3 = c3 - plane.signed_distance(c3) * plane.normal
    local = plane.to_local(part.vertices, c3)[:, :2]
    half = 0.5 - margin
    if np.abs(local).max() > half:
        raise FlattenError(f"part footprint exceeds the tile interior (|coord| {np.abs(local).max():.4g} > {half:.4g})")

    bloop = patch.boundary.vertex_indices
    tris = part.triangles
    poly = local[bloop]
    if _self_intersects(poly):
        raise FlattenError("part boundary self-intersects in the plane")
    if _polygon_area(poly) < 0:
        # make the part counter-clockwise in (t, b)
        tris = tris[:, ::-1]
        bloop = bloop[::-1]
        poly = poly[::-1]

    n = tile_resolution
    cell = 1.0 / n
    ticks = np.linspace(-0.5, 0.5, n + 1)
    gi, gj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    lo = np.stack([ticks[gi.ravel()], ticks[gj.ravel()]], 1)
    clearance = 0.25 * cell
    removed = _quads_hit_polygon(lo - clearance, lo + cell + clearance, poly).reshape(n, n)
    removed = _clean_hole(removed)
    if removed[0].any() or removed[-1].any() or removed[:, 0].any() or removed[:, -1].any():
        raise FlattenError("part footprint reaches the tile border; increase margin or tile_resolution")

    keep_quads = np.flatnonzero(~removed.ravel())
    gt = grid_triangles(n + 1, n + 1).reshape(2, n * n, 3)[:, keep_quads].transpose(1, 0, 2).reshape(-1, 3)
    gxy = np.stack(np.meshgrid(ticks, ticks, indexing="xy"), -1).reshape(-1, 2)
    used, inv = np.unique(gt, return_inverse=True)
    gt = inv.reshape(-1, 3)
    gxy = gxy[used]
    grid_mesh = TriMesh(np.column_stack([gxy, np.zeros(len(gxy))]), gt, check=False)
    loops = boundary_loops(grid_mesh)
    if len(loops) != 2:
        raise FlattenError(f"tile with hole has {len(loops)} boundary loops, expected 2")
    areas = [_polygon_area(gxy[lp.vertex_indices]) for lp in loops]
    # the hole is traversed clockwise by the grid's half-edges
    hole = loops[int(np.argmin(areas))].vertex_indices[::-1]

    ng = len(gxy)
    verts2 = np.concatenate([gxy, local])
    part_loop = bloop + ng
    band = _zipper(hole, part_loop, verts2)
    all_tris = np.concatenate([gt, tris + ng, band])
    v3 = np.concatenate([plane.from_local(np.column_stack([gxy, np.zeros(ng)]), c3), part.vertices])
    uv = verts2 + 0.5
    out = TriMesh(v3, all_tris, uvs=uv)
    if return_seam:
        return StitchResult(out, hole.copy(), part_loop, plane, c3)
    return out


def smooth_seam(mesh: TriMesh, seam: ArrayLike, rings: int = 2, iterations: int = 3, lam: float = 0.5) -> TriMesh:
    """Laplacian smoothing of the vertices within ``rings`` hops of the seam, outer border excluded."""
    sel = select_near_boundary(mesh, np.asarray(seam, dtype=np.int64), rings)
    border = np.concatenate([lp.vertex_indices for lp in boundary_loops(mesh)] or [np.zeros(0, np.int64)])
    sel = np.setdiff1d(sel, border)
    return laplacian_smooth(mesh, sel, iterations=iterations, lam=lam)


# -- augmentation -------------------------------------------------------------


def augment(
    part: TriMesh,
    translation: ArrayLike = (0.0, 0.0),
    scale: float = 1.0,
    rotation: float = 0.0,
    *,
    plane: Plane | None = None,
    tile_center: ArrayLike | None = None,
    margin: float = 0.0,
) -> TriMesh:
    """Similarity transform about the part's in-plane centroid.

    ``translation`` is in tile units along (t, b) and ``rotation`` in radians
    about the plane normal. The transformed footprint must stay inside the
    unit tile centred at ``tile_center`` (default: the boundary centroid)
    shrunk by ``margin``.
    """
    if not scale > 0:
        raise FlattenError("scale must be positive")
    tr = np.asarray(translation, dtype=np.float64).reshape(2)
    if scale == 1.0 and rotation == 0.0 and not tr.any():
        return part
    patch = build_patch(part)
    if plane is None:
        plane = fit_plane(patch.boundary.positions, reference=part.vertices.mean(0))
    proj = part.vertices - np.outer(plane.signed_distance(part.vertices), plane.normal)
    c = proj.mean(0)
    t, b, n = plane.tangent, plane.bitangent, plane.normal
    cs, sn = np.cos(rotation), np.sin(rotation)
    # rotation about n in the (t, b, n) basis
    rot = np.outer(n, n) + cs * (np.outer(t, t) + np.outer(b, b)) + sn * (np.outer(b, t) - np.outer(t, b))
    x = c + scale * (part.vertices - c) @ rot.T + tr[0] * t + tr[1] * b
    tc = patch.boundary.positions.mean(0) if tile_center is None else np.asarray(tile_center, float)
    local = plane.to_local(x, tc)[:, :2]
    lim = 0.5 - margin
    if np.abs(local).max() > lim:
        raise FlattenError(f"augmented footprint leaves the tile (|coord| {np.abs(local).max():.4g} > {lim:.4g})")
    return part.replace(vertices=x)
