"""Keypoint lasso: voxelize a surface, close a loop of shortest voxel paths, flood the enclosed side.

Grid convention: with ``h = max_extent / (R - 1)`` and ``origin = bbox_min - h / 2``
the bounding-box corners sit at voxel centres, so the box plus half a voxel
on every side spans the grid. Voxel ``(i, j, k)`` is the closed cube
``origin + h * [i, i+1] x [j, j+1] x [k, k+1]``.
"""

from __future__ import annotations

import heapq
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike

from .errors import DataError, LassoError, MeshError, SeparationError
from .meshcore import TriMesh

ESCAPE_FRACTION = 0.8
_PAIR_CHUNK = 1 << 20

_OFFSETS26 = np.array(
    [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1) if (a, b, c) != (0, 0, 0)],
    dtype=np.int64,
)
_OFFSETS6 = _OFFSETS26[np.abs(_OFFSETS26).sum(1) == 1]
_OFFSETS18 = _OFFSETS26[np.abs(_OFFSETS26).sum(1) <= 2]


def _offsets(connectivity: int) -> np.ndarray:
    try:
        return {6: _OFFSETS6, 18: _OFFSETS18, 26: _OFFSETS26}[connectivity]
    except KeyError:
        raise ValueError("connectivity must be 6, 18 or 26") from None


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Surface voxels of a mesh; ``voxels`` is sorted by linear key."""

    resolution: int
    origin: np.ndarray
    voxel_size: float
    voxels: np.ndarray
    _keys: np.ndarray = field(repr=False)

    @classmethod
    def from_voxels(cls, resolution: int, origin: ArrayLike, voxel_size: float, voxels: ArrayLike) -> "VoxelGrid":
        v = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        if len(v) and (v.min() < 0 or v.max() >= resolution):
            raise DataError("voxel coordinates outside [0, resolution)")
        keys = _key(v, resolution)
        keys, first = np.unique(keys, return_index=True)
        v = v[first]
        v.setflags(write=False)
        keys.setflags(write=False)
        o = np.asarray(origin, dtype=np.float64).copy()
        o.setflags(write=False)
        return cls(int(resolution), o, float(voxel_size), v, keys)

    def __len__(self) -> int:
        return len(self.voxels)

    def to_grid(self, points: ArrayLike) -> np.ndarray:
        """Continuous grid coordinates; voxel i spans [i, i + 1]."""
        return (np.asarray(points, dtype=np.float64) - self.origin) / self.voxel_size

    def voxel_of(self, points: ArrayLike) -> np.ndarray:
        return np.floor(self.to_grid(points)).astype(np.int64)

    def index_of(self, voxels: ArrayLike) -> np.ndarray:
        """Row of each voxel in ``self.voxels`` or -1 when unoccupied."""
        v = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        if not len(self._keys):
            return np.full(len(v), -1)
        inside = ((v >= 0) & (v < self.resolution)).all(1)
        keys = _key(np.where(inside[:, None], v, 0), self.resolution)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        hit = inside & (self._keys[pos] == keys)
        return np.where(hit, pos, -1)

    def contains(self, voxel: ArrayLike) -> bool:
        return bool(self.index_of(voxel)[0] >= 0)

    def neighbors(self, connectivity: int = 26) -> tuple[np.ndarray, np.ndarray]:
        """CSR neighbour lists (indptr, indices) over occupied voxels, ascending per row."""
        off = _offsets(connectivity)
        n = len(self.voxels)
        cand = self.index_of((self.voxels[:, None, :] + off[None]).reshape(-1, 3)).reshape(n, len(off))
        rows = np.repeat(np.arange(n), len(off))
        cols = cand.ravel()
        keep = cols >= 0
        rows, cols = rows[keep], cols[keep]
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        indptr = np.searchsorted(rows, np.arange(n + 1))
        return indptr, cols


def _key(v: np.ndarray, r: int) -> np.ndarray:
    return v[:, 0] + r * (v[:, 1] + r * v[:, 2])


@dataclass(frozen=True, eq=False)
class VoxelLoop:
    """Closed chain of occupied voxels; consecutive entries (and last to first) are 26-neighbours."""

    voxels: np.ndarray
    segment_costs: tuple[float, ...] = ()

    def __len__(self) -> int:
        return len(self.voxels)

    @property
    def cost(self) -> float:
        """Euclidean length of the closed chain in voxel units."""
        return _chain_cost(np.vstack([self.voxels, self.voxels[:1]]))


def _chain_cost(v: np.ndarray) -> float:
    steps = np.abs(np.diff(v, axis=0)).sum(1)
    return float(np.sqrt(steps).sum())


# -- voxelization ------------------------------------------------------------


def grid_for_mesh(mesh: TriMesh, resolution: int) -> tuple[np.ndarray, float]:
    """Origin and voxel size mapping the mesh bounding box onto ``resolution`` voxels."""
    if not 8 <= resolution <= 1024:
        raise DataError("resolution must lie in [8, 1024]")
    if mesh.n_triangles == 0:
        raise MeshError("cannot voxelize an empty mesh")
    used = np.unique(mesh.triangles)
    lo = mesh.vertices[used].min(0)
    hi = mesh.vertices[used].max(0)
    extent = float((hi - lo).max())
    if not extent > 0 or float(mesh.face_areas.sum()) == 0.0:
        raise MeshError("mesh is degenerate (zero extent or zero area)")
    h = extent / (resolution - 1)
    return lo - 0.5 * h, h


def triangle_box_overlap(tri: np.ndarray, centers: np.ndarray, half: float = 0.5) -> np.ndarray:
    """Separating-axis test between triangles (P, 3, 3) and axis-aligned cubes (P, 3).

    Touching counts as overlap (closed sets), which makes the voxelization
    conservative.
    """
    v = tri - centers[:, None, :]
    hit = ((v.min(1) <= half) & (v.max(1) >= -half)).all(1)
    e = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]], 1)
    n = np.cross(e[:, 0], e[:, 1])
    d = np.einsum("pk,pk->p", n, v[:, 0])
    hit &= np.abs(d) <= half * np.abs(n).sum(1)
    for axis in range(3):
        u = np.zeros(3)
        u[axis] = 1.0
        a = np.cross(u[None, None, :], e)  # (P, 3 edges, 3)
        p = np.einsum("pek,pvk->pev", a, v)
        r = half * np.abs(a).sum(2)
        hit &= (p.min(2) <= r).all(1) & (p.max(2) >= -r).all(1)
    return hit


def voxelize_surface(mesh: TriMesh, resolution: int) -> VoxelGrid:
    """Occupy every voxel whose closed cube intersects a triangle."""
    origin, h = grid_for_mesh(mesh, resolution)
    g = (mesh.corners - origin) / h
    lo = np.clip(np.ceil(g.min(1)).astype(np.int64) - 1, 0, resolution - 1)
    hi = np.clip(np.floor(g.max(1)).astype(np.int64), 0, resolution - 1)
    span = hi - lo + 1
    counts = span.prod(1)
    cum = np.cumsum(counts)
    found = []
    start = 0
    # batches of triangles whose candidate boxes hold about _PAIR_CHUNK voxels
    while start < mesh.n_triangles:
        before = cum[start - 1] if start else 0
        stop = max(int(np.searchsorted(cum, before + _PAIR_CHUNK, side="right")), start + 1)
        ids = np.arange(start, stop)
        c = counts[ids]
        pair_tri = np.repeat(ids, c)
        local = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        s = span[pair_tri]
        vi = np.stack([local % s[:, 0], (local // s[:, 0]) % s[:, 1], local // (s[:, 0] * s[:, 1])], 1) + lo[pair_tri]
        hit = triangle_box_overlap(g[pair_tri], vi + 0.5)
        found.append(vi[hit])
        start = stop
    vox = np.concatenate(found) if found else np.zeros((0, 3), np.int64)
    return VoxelGrid.from_voxels(resolution, origin, h, vox)


# -- shortest paths ----------------------------------------------------------


def shortest_voxel_path(grid: VoxelGrid, a: ArrayLike, b: ArrayLike) -> tuple[np.ndarray, float]:
    """Dijkstra path from voxel ``a`` to ``b`` over 26-neighbours with step weights 1, sqrt 2, sqrt 3.

    Ties are broken towards the smaller voxel index, so the result is
    deterministic. Returns the (L, 3) voxel chain and its cost.
    """
    ia, ib = (int(i) for i in grid.index_of(np.array([a, b])))
    for v, i in ((a, ia), (b, ib)):
        if i < 0:
            raise LassoError(f"voxel {tuple(int(x) for x in v)} is not occupied")
    indptr, nbr = _cached_neighbors(grid)
    step = np.sqrt(np.abs(grid.voxels[nbr] - np.repeat(grid.voxels, np.diff(indptr), axis=0)).sum(1))
    dist = {ia: 0.0}
    prev = {ia: -1}
    done = set()
    heap = [(0.0, ia)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == ib:
            break
        for k in range(indptr[u], indptr[u + 1]):
            w = int(nbr[k])
            if w in done:
                continue
            nd = d + step[k]
            old = dist.get(w)
            if old is None or nd < old or (nd == old and u < prev[w]):
                dist[w] = nd
                prev[w] = u
                heapq.heappush(heap, (nd, w))
    if ib not in done:
        raise LassoError(f"no voxel path between {tuple(int(x) for x in a)} and {tuple(int(x) for x in b)}")
    chain = [ib]
    while chain[-1] != ia:
        chain.append(prev[chain[-1]])
    chain.reverse()
    return grid.voxels[chain].copy(), float(dist[ib])


_NEIGHBOR_CACHE: dict[int, tuple[VoxelGrid, tuple[np.ndarray, np.ndarray]]] = {}


def _cached_neighbors(grid: VoxelGrid) -> tuple[np.ndarray, np.ndarray]:
    hit = _NEIGHBOR_CACHE.get(id(grid))
    if hit is not None and hit[0] is grid:
        return hit[1]
    nb = grid.neighbors(26)
    _NEIGHBOR_CACHE.clear()
    _NEIGHBOR_CACHE[id(grid)] = (grid, nb)
    return nb


def dense_loop(grid: VoxelGrid, keypoints: ArrayLike) -> VoxelLoop:
    """Join consecutive keypoints (closing last to first) by shortest voxel paths."""
    kp = np.asarray(keypoints, dtype=np.int64).reshape(-1, 3)
    if len(kp) < 3:
        raise LassoError(f"need at least 3 keypoints, got {len(kp)}")
    missing = np.flatnonzero(grid.index_of(kp) < 0)
    if len(missing):
        raise LassoError(f"keypoint {tuple(int(x) for x in kp[missing[0]])} is not occupied")
    parts = []
    costs = []
    for i in range(len(kp)):
        path, cost = shortest_voxel_path(grid, kp[i], kp[(i + 1) % len(kp)])
        # the junction voxel starts the next segment
        parts.append(path[:-1])
        costs.append(cost)
    loop = np.concatenate(parts)
    if len(loop) == 0:
        raise LassoError("keypoints collapse to a single voxel")
    keys = _key(loop, grid.resolution)
    uniq, counts = np.unique(keys, return_counts=True)
    if (counts > 1).any():
        rep = loop[np.flatnonzero(keys == uniq[counts > 1][0])[0]]
        raise LassoError(f"loop passes voxel {tuple(int(x) for x in rep)} twice; reorder or add keypoints")
    loop.setflags(write=False)
    return VoxelLoop(loop, tuple(costs))


# -- flood fill --------------------------------------------------------------


def _bfs(indptr: np.ndarray, nbr: np.ndarray, sources: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Hop distances from ``sources`` through ``allowed`` voxels (-1 where unreachable)."""
    dist = np.full(len(allowed), -1, dtype=np.int64)
    frontier = np.asarray(sources, dtype=np.int64)
    dist[frontier] = 0
    level = 0
    while len(frontier):
        level += 1
        starts, stops = indptr[frontier], indptr[frontier + 1]
        lens = stops - starts
        idx = np.repeat(starts - np.concatenate([[0], np.cumsum(lens)[:-1]]), lens) + np.arange(lens.sum())
        cand = np.unique(nbr[idx])
        frontier = cand[allowed[cand] & (dist[cand] < 0)]
        dist[frontier] = level
    return dist


def flood_select(
    grid: VoxelGrid,
    loop: VoxelLoop,
    seed: ArrayLike,
    connectivity: int = 26,
    barrier_radius: int = 1,
) -> np.ndarray:
    """Region on the seed's side of the loop, loop voxels included.

    The flood runs over occupied voxels outside a barrier made of the loop
    and every occupied voxel within ``barrier_radius`` (Chebyshev) of it.
    A bare voxel chain leaks on a voxelized surface: it cuts corners at
    creases and covers only one layer where the shell is two voxels thick.
    Barrier voxels off the loop are then handed back by breadth-first
    distance: each goes to the side whose component reaches it first (ties
    and unreachable voxels go to both), so the two sides of a separating
    loop plus the loop cover every occupied voxel. ``barrier_radius=0``
    floods around the bare loop.

    Raises :class:`SeparationError` when the region (loop excluded) covers
    more than 80% of the occupied voxels.
    """
    if barrier_radius < 0:
        raise ValueError("barrier_radius must be >= 0")
    s = int(grid.index_of(seed)[0])
    if s < 0:
        raise LassoError(f"seed {tuple(int(x) for x in np.ravel(seed))} is not occupied")
    on_loop = np.zeros(len(grid), bool)
    li = grid.index_of(loop.voxels)
    if (li < 0).any():
        raise LassoError("loop contains unoccupied voxels")
    on_loop[li] = True
    if on_loop[s]:
        raise LassoError("seed lies on the loop")
    barrier = on_loop
    if barrier_radius:
        ip26, nb26 = _cached_neighbors(grid)
        d = _bfs(ip26, nb26, li, np.ones(len(grid), bool))
        barrier = (d >= 0) & (d <= barrier_radius)
        if barrier[s]:
            raise LassoError(f"seed is within {barrier_radius} voxel(s) of the loop; pick a seed further inside")
    indptr, nbr = grid.neighbors(connectivity)
    free = ~barrier
    inside = _bfs(indptr, nbr, [s], free) >= 0
    others = free & ~inside
    band = barrier & ~on_loop
    d_in = _bfs(indptr, nbr, np.flatnonzero(inside), inside | band)
    d_out = _bfs(indptr, nbr, np.flatnonzero(others), others | band)
    claim = band & ((d_out < 0) | ((d_in >= 0) & (d_in <= d_out)))
    region = inside | claim
    n_region = int(region.sum())
    if n_region > ESCAPE_FRACTION * len(grid):
        raise SeparationError(
            f"flood from seed reached {n_region} of {len(grid)} surface voxels; the loop does not separate the surface"
        )
    return grid.voxels[np.flatnonzero(region | on_loop)].copy()


# -- part extraction ---------------------------------------------------------


def extract_part(mesh: TriMesh, region: ArrayLike, grid: VoxelGrid) -> TriMesh:
    """Submesh of the triangles whose centroids fall in ``region`` voxels."""
    reg = np.asarray(region, dtype=np.int64).reshape(-1, 3)
    if not len(reg):
        raise LassoError("empty voxel region")
    rkeys = np.unique(_key(reg, grid.resolution))
    cv = grid.voxel_of(mesh.corners.mean(1))
    inside = ((cv >= 0) & (cv < grid.resolution)).all(1)
    hit = inside & np.isin(_key(np.where(inside[:, None], cv, 0), grid.resolution), rkeys)
    ids = np.flatnonzero(hit)
    if not len(ids):
        raise LassoError("no triangle centroid falls inside the selected region")
    return mesh.submesh(ids)


def lasso_part(mesh: TriMesh, keypoints: ArrayLike, seed: ArrayLike, resolution: int, connectivity: int = 26) -> TriMesh:
    grid = voxelize_surface(mesh, resolution)
    loop = dense_loop(grid, keypoints)
    region = flood_select(grid, loop, seed, connectivity)
    return extract_part(mesh, region, grid)


# -- keypoint files ----------------------------------------------------------


@dataclass(frozen=True)
class KeypointFile:
    resolution: int
    keypoints: np.ndarray
    seed: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = {"resolution": self.resolution, "keypoints": self.keypoints.tolist()}
        if self.seed is not None:
            d["seed"] = self.seed.tolist()
        return d


def _triples(x, what: str) -> np.ndarray:
    a = np.asarray(x)
    if a.ndim != 2 or a.shape[1] != 3 or a.dtype.kind not in "iu":
        raise DataError(f"{what} must be a list of integer [i, j, k] triples")
    return a.astype(np.int64)


def read_keypoints(path: str | os.PathLike) -> KeypointFile:
    """Read ``{"resolution": R, "keypoints": [[i, j, k], ...], "seed": [i, j, k]}``."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or "resolution" not in doc or "keypoints" not in doc:
        raise DataError(f"{path}: expected an object with 'resolution' and 'keypoints'")
    r = doc["resolution"]
    if not isinstance(r, int) or isinstance(r, bool):
        raise DataError(f"{path}: resolution must be an integer")
    kp = _triples(doc["keypoints"], "keypoints")
    seed = None if doc.get("seed") is None else _triples([doc["seed"]], "seed")[0]
    return KeypointFile(r, kp, seed)


def write_keypoints(kf: KeypointFile, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(kf.to_dict(), indent=1) + "\n")
