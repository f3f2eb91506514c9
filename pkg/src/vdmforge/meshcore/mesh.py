from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike

from ..errors import MeshError

NORMAL_TOL = 1e-6


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh with optional per-vertex UVs and unit normals.

    Arrays are copied on construction and made read-only, so a mesh can be
    shared freely between threads.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    uvs: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __init__(
        self,
        vertices: ArrayLike,
        triangles: ArrayLike,
        uvs: ArrayLike | None = None,
        normals: ArrayLike | None = None,
        *,
        check: bool = True,
    ):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        uv = None if uvs is None else np.array(uvs, dtype=np.float64).reshape(-1, 2)
        nrm = None if normals is None else np.array(normals, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "triangles", _readonly(t))
        object.__setattr__(self, "uvs", None if uv is None else _readonly(uv))
        object.__setattr__(self, "normals", None if nrm is None else _readonly(nrm))
        if check:
            self.validate()

    def validate(self) -> None:
        nv = len(self.vertices)
        t = self.triangles
        if len(t):
            if t.min() < 0 or t.max() >= nv:
                bad = int(np.flatnonzero((t < 0).any(1) | (t >= nv).any(1))[0])
                raise MeshError(f"triangle {bad} references vertex out of range [0, {nv})")
            degenerate = (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
            if degenerate.any():
                raise MeshError(f"triangle {int(np.flatnonzero(degenerate)[0])} repeats a vertex index")
        if not np.isfinite(self.vertices).all():
            raise MeshError("non-finite vertex coordinates")
        if self.uvs is not None and len(self.uvs) != nv:
            raise MeshError(f"{len(self.uvs)} uvs for {nv} vertices")
        if self.normals is not None:
            if len(self.normals) != nv:
                raise MeshError(f"{len(self.normals)} normals for {nv} vertices")
            if len(self.normals) and np.abs(np.linalg.norm(self.normals, axis=1) - 1).max() > NORMAL_TOL:
                raise MeshError("stored normals are not unit length")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def replace(self, **changes) -> "TriMesh":
        kw = dict(vertices=self.vertices, triangles=self.triangles, uvs=self.uvs, normals=self.normals)
        kw.update(changes)
        return TriMesh(**kw)

    @cached_property
    def corners(self) -> np.ndarray:
        """(T, 3, 3) triangle corner positions."""
        return self.vertices[self.triangles]

    @cached_property
    def face_cross(self) -> np.ndarray:
        c = self.corners
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        n = self.face_cross
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)

    def vertex_normals(self) -> np.ndarray:
        """Stored normals, or area-weighted face normals when none are stored."""
        if self.normals is not None:
            return self.normals
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.triangles[:, k], self.face_cross)
        ln = np.linalg.norm(acc, axis=1, keepdims=True)
        return np.divide(acc, ln, out=np.zeros_like(acc), where=ln > 0)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (E, 2) pairs."""
        return np.unique(np.sort(self.directed_edges, axis=1), axis=0)

    @cached_property
    def directed_edges(self) -> np.ndarray:
        t = self.triangles
        return np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])

    @cached_property
    def adjacency(self) -> list[np.ndarray]:
        """Sorted neighbour list per vertex."""
        e = self.edges
        both = np.concatenate([e, e[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        starts = np.searchsorted(both[:, 0], np.arange(self.n_vertices + 1))
        return [both[starts[i]:starts[i + 1], 1] for i in range(self.n_vertices)]

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges) + self.n_triangles

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.n_vertices == 0:
            raise MeshError("empty mesh has no bounds")
        return self.vertices.min(0), self.vertices.max(0)

    def flipped(self) -> "TriMesh":
        return self.replace(triangles=self.triangles[:, ::-1])

    def submesh(self, triangle_ids: ArrayLike) -> "TriMesh":
        """Mesh made of the given triangles, with vertices reindexed compactly."""
        tri = self.triangles[np.asarray(triangle_ids, dtype=np.int64)]
        used, inverse = np.unique(tri, return_inverse=True)
        return TriMesh(
            self.vertices[used],
            inverse.reshape(-1, 3),
            None if self.uvs is None else self.uvs[used],
            None if self.normals is None else self.normals[used],
        )

    def __repr__(self) -> str:
        extra = "".join(s for s, a in ((", uvs", self.uvs), (", normals", self.normals)) if a is not None)
        return f"TriMesh(|V|={self.n_vertices}, |T|={self.n_triangles}{extra})"


@dataclass(frozen=True, eq=False)
class BoundaryLoop:
    """Ordered closed loop of boundary vertices on ``host``.

    The order follows the directed half-edges of the incident triangles, so
    for a counter-clockwise oriented patch the loop runs counter-clockwise.
    """

    vertex_indices: np.ndarray
    host: TriMesh = field(repr=False)

    def __len__(self) -> int:
        return len(self.vertex_indices)

    @property
    def positions(self) -> np.ndarray:
        return self.host.vertices[self.vertex_indices]

    def edges(self) -> np.ndarray:
        v = self.vertex_indices
        return np.stack([v, np.roll(v, -1)], axis=1)


@dataclass(frozen=True, eq=False)
class OrientedPointSet:
    points: np.ndarray
    normals: np.ndarray

    def __init__(self, points: ArrayLike, normals: ArrayLike, *, check: bool = True):
        p = np.array(points, dtype=np.float64).reshape(-1, 3)
        n = np.array(normals, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", _readonly(p))
        object.__setattr__(self, "normals", _readonly(n))
        if check:
            if len(p) != len(n):
                raise MeshError(f"{len(p)} points but {len(n)} normals")
            if len(n) and np.abs(np.linalg.norm(n, axis=1) - 1).max() > NORMAL_TOL:
                raise MeshError("point normals are not unit length")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask_or_index: ArrayLike) -> "OrientedPointSet":
        idx = np.asarray(mask_or_index)
        return OrientedPointSet(self.points[idx], self.normals[idx], check=False)
