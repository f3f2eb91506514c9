"""Orthographic normal-map and gray rendering at fixed camera poses.

Camera convention: a pose (elevation, azimuth) maps world vectors to camera
space by ``V = R_x(elevation) @ R_y(azimuth)`` (right-handed rotations about
the world x and y axes). In camera space x points right, y up and +z towards
the viewer, so the camera sits at ``center + V.T @ (0, 0, dist)`` and looks
along ``-V.T @ (0, 0, 1)``. The frontal pose (0, 0) looks down -z at a tile
facing +z; positive elevation looks from above.

Pixel (row r, column c) of an N x N image samples the camera-space ray at
``x = (c + 0.5) W / N - W / 2`` and ``y = W / 2 - (r + 0.5) W / N``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike

from .bvh import build_bvh
from .errors import DataError, FormatError, MeshError
from .meshcore import TriMesh, sample_surface

GENERATION_POSES = ((0.0, -60.0), (0.0, -30.0), (0.0, 30.0), (0.0, 60.0), (45.0, 0.0), (-45.0, 0.0))
EVALUATION_POSES = (
    (0.0, 60.0), (0.0, -60.0), (0.0, 45.0), (0.0, -45.0), (0.0, 30.0), (0.0, -30.0),
    (60.0, 0.0), (-60.0, 0.0), (45.0, 0.0), (-45.0, 0.0), (30.0, 0.0), (-30.0, 0.0),
    (0.0, 0.0),
)
BACKGROUND_NORMAL = np.array([0.0, 0.0, 1.0])
BACKGROUND_GRAY = 0.5
NRMF_MAGIC = b"NRMF"
NRMF_VERSION = 1
_BOX_PAD = 1e-9


def rot_x(deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class CameraPose:
    elevation: float = 0.0
    azimuth: float = 0.0
    width: float = 1.2
    resolution: int = 320
    center: tuple = (0.0, 0.0, 0.0)
    projection: str = field(default="orthographic", init=False)

    def __post_init__(self):
        if not -90.0 <= self.elevation <= 90.0:
            raise DataError("elevation must lie in [-90, 90] degrees")
        if not -180.0 <= self.azimuth <= 180.0:
            raise DataError("azimuth must lie in [-180, 180] degrees")
        if not self.width > 0 or self.resolution < 1:
            raise DataError("frame width must be positive and resolution >= 1")
        object.__setattr__(self, "center", tuple(float(x) for x in self.center))

    @property
    def view(self) -> np.ndarray:
        """World-to-camera rotation."""
        return rot_x(self.elevation) @ rot_y(self.azimuth)

    @property
    def direction(self) -> np.ndarray:
        """Unit vector from the scene towards the camera, in world space."""
        return self.view.T @ np.array([0.0, 0.0, 1.0])

    def pixel_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Camera-space (x, y) of all pixel centres, row-major."""
        n, w = self.resolution, self.width
        c = (np.arange(n) + 0.5) * w / n - w / 2
        x, y = np.meshgrid(c, -c, indexing="xy")
        return x.ravel(), y.ravel()

    def to_dict(self) -> dict:
        return {"elevation": self.elevation, "azimuth": self.azimuth, "width": self.width,
                "resolution": self.resolution, "center": list(self.center), "projection": self.projection}


def standard_poses(kind: str, width: float = 1.2, resolution: int = 320, center=(0.0, 0.0, 0.0)) -> list[CameraPose]:
    """The six normal-map generation poses or the thirteen evaluation poses, as (elevation, azimuth)."""
    table = {"generation": GENERATION_POSES, "evaluation": EVALUATION_POSES}
    if kind not in table:
        raise DataError(f"pose set must be 'generation' or 'evaluation', got {kind!r}")
    return [CameraPose(e, a, width, resolution, center) for e, a in table[kind]]


@dataclass(frozen=True, eq=False)
class NormalMap:
    """H x W x 3 float32 colours ``(n_cam + 1) / 2`` and the foreground mask."""

    rgb: np.ndarray
    mask: np.ndarray
    pose: CameraPose | None = None

    def decoded(self) -> np.ndarray:
        return 2.0 * self.rgb.astype(np.float64) - 1.0


@dataclass(frozen=True, eq=False)
class RayHits:
    """Nearest hit per pixel: triangle id (-1 for background), barycentrics, depth."""

    triangle: np.ndarray
    bary: np.ndarray
    depth: np.ndarray


def _camera_triangles(mesh: TriMesh, pose: CameraPose) -> np.ndarray:
    return (mesh.corners - np.asarray(pose.center)) @ pose.view.T


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _hit_test(px: np.ndarray, py: np.ndarray, tri: np.ndarray):
    """Barycentrics and depth of orthographic rays (P,) against triangles (T, 3, 3).

    Returns (w (P, T, 3), z (P, T)) with z = -inf where the ray misses or the
    triangle is seen edge-on. Points on edges count as hits.
    """
    ax, ay = tri[:, 0, 0], tri[:, 0, 1]
    bx, by = tri[:, 1, 0], tri[:, 1, 1]
    cx, cy = tri[:, 2, 0], tri[:, 2, 1]
    d = _edge(ax, ay, bx, by, cx, cy)
    px = px[:, None]
    py = py[:, None]
    w0 = _edge(bx, by, cx, cy, px, py)
    w1 = _edge(cx, cy, ax, ay, px, py)
    w2 = _edge(ax, ay, bx, by, px, py)
    sgn = np.sign(d)
    inside = (w0 * sgn >= 0) & (w1 * sgn >= 0) & (w2 * sgn >= 0) & (d != 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.stack([w0, w1, w2], -1) / d[None, :, None]
        z = w[..., 0] * tri[:, 0, 2] + w[..., 1] * tri[:, 1, 2] + w[..., 2] * tri[:, 2, 2]
    z = np.where(inside, z, -np.inf)
    return w, z


def _update(best_z, best_t, idx, px, py, tri, tri_ids):
    """Merge hits of triangles ``tri_ids`` (ascending) into the per-pixel best (max z, then min id)."""
    _, z = _hit_test(px, py, tri)
    k = np.argmax(z, axis=1)  # first maximum, i.e. smallest id among equal depths
    zk = z[np.arange(len(k)), k]
    tk = tri_ids[k]
    cur_z, cur_t = best_z[idx], best_t[idx]
    better = (zk > cur_z) | ((zk == cur_z) & (zk > -np.inf) & ((cur_t < 0) | (tk < cur_t)))
    best_z[idx[better]] = zk[better]
    best_t[idx[better]] = tk[better]


def _finish(px, py, tri, best_t, best_z) -> RayHits:
    bary = np.zeros((len(px), 3))
    hit = np.flatnonzero(best_t >= 0)
    if len(hit):
        t = tri[best_t[hit]]
        ax, ay, bx, by, cx, cy = t[:, 0, 0], t[:, 0, 1], t[:, 1, 0], t[:, 1, 1], t[:, 2, 0], t[:, 2, 1]
        d = _edge(ax, ay, bx, by, cx, cy)
        x, y = px[hit], py[hit]
        bary[hit] = np.stack([_edge(bx, by, cx, cy, x, y), _edge(cx, cy, ax, ay, x, y), _edge(ax, ay, bx, by, x, y)], 1) / d[:, None]
    return RayHits(best_t, bary, best_z)


def cast_rays_bruteforce(mesh: TriMesh, pose: CameraPose, chunk: int = 256) -> RayHits:
    """Test every pixel against every triangle."""
    tri = _camera_triangles(mesh, pose)
    px, py = pose.pixel_coords()
    best_z = np.full(len(px), -np.inf)
    best_t = np.full(len(px), -1, dtype=np.int64)
    idx = np.arange(len(px))
    for s in range(0, len(tri), chunk):
        ids = np.arange(s, min(s + chunk, len(tri)))
        _update(best_z, best_t, idx, px, py, tri[ids], ids)
    return _finish(px, py, tri, best_t, best_z)


def cast_rays(mesh: TriMesh, pose: CameraPose, leaf_size: int = 8) -> RayHits:
    """BVH-accelerated orthographic ray casting; identical results to :func:`cast_rays_bruteforce`.

    Pixels travel down the tree in packets. A packet is culled against a node
    by its padded camera-space xy box and by depth (a node entirely behind a
    pixel's current hit cannot win; equal depth is kept for the id tie-break).
    """
    if mesh.n_triangles == 0:
        raise MeshError("cannot render an empty mesh")
    tri = _camera_triangles(mesh, pose)
    px, py = pose.pixel_coords()
    best_z = np.full(len(px), -np.inf)
    best_t = np.full(len(px), -1, dtype=np.int64)
    bvh = build_bvh(tri, leaf_size)
    pad = _BOX_PAD * max(1.0, float(np.abs(tri).max()))
    lo = bvh.lo - pad
    hi = bvh.hi + pad
    stack = [(0, np.arange(len(px)))]
    while stack:
        node, idx = stack.pop()
        x, y = px[idx], py[idx]
        keep = (x >= lo[node, 0]) & (x <= hi[node, 0]) & (y >= lo[node, 1]) & (y <= hi[node, 1])
        keep &= best_z[idx] <= hi[node, 2]
        idx = idx[keep]
        if not len(idx):
            continue
        if bvh.left[node] < 0:
            ids = np.sort(bvh.leaf_triangles(node))
            _update(best_z, best_t, idx, px[idx], py[idx], tri[ids], ids)
            continue
        l, r = bvh.left[node], bvh.right[node]
        # visit the nearer child (larger max z) first so depth culling bites sooner
        first, second = (l, r) if hi[l, 2] >= hi[r, 2] else (r, l)
        stack.append((second, idx))
        stack.append((first, idx))
    return _finish(px, py, tri, best_t, best_z)


def _shading_normals(mesh: TriMesh, pose: CameraPose, hits: RayHits, shading: str) -> np.ndarray:
    """Camera-space unit normals facing the camera at hit pixels (P_hit, 3)."""
    hit = hits.triangle >= 0
    t = hits.triangle[hit]
    face = mesh.face_normals[t] @ pose.view.T
    # the facing side is decided by the geometric normal, also for smooth shading
    sign = np.where(face[:, 2] < 0, -1.0, 1.0)[:, None]
    if shading == "flat":
        return face * sign
    if shading != "smooth":
        raise DataError("shading must be 'flat' or 'smooth'")
    vn = mesh.vertex_normals()[mesh.triangles[t]]
    n = np.einsum("pk,pkj->pj", hits.bary[hit], vn)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    return (n @ pose.view.T) * sign


def render_normals(mesh: TriMesh, pose: CameraPose, *, shading: str = "flat", accelerated: bool = True) -> NormalMap:
    """Camera-space normal map of the nearest surface; background encodes (0, 0, 1)."""
    hits = (cast_rays if accelerated else cast_rays_bruteforce)(mesh, pose)
    n = pose.resolution
    normals = np.tile(BACKGROUND_NORMAL, (n * n, 1))
    mask = hits.triangle >= 0
    normals[mask] = _shading_normals(mesh, pose, hits, shading)
    rgb = ((normals + 1.0) / 2.0).astype(np.float32).reshape(n, n, 3)
    return NormalMap(rgb, mask.reshape(n, n), pose)


def render_gray(mesh: TriMesh, pose: CameraPose, light_direction: ArrayLike | None = None, *, shading: str = "flat") -> np.ndarray:
    """Lambertian shade 0.2 + 0.8 max(0, n.l) on the foreground, 0.5 elsewhere.

    ``light_direction`` is a world-space unit vector pointing towards the
    light; by default the light sits at the camera.
    """
    l = pose.direction if light_direction is None else np.asarray(light_direction, dtype=np.float64)
    if abs(np.linalg.norm(l) - 1.0) > 1e-6:
        raise DataError("light_direction must be a unit vector")
    hits = cast_rays(mesh, pose)
    n = pose.resolution
    img = np.full(n * n, BACKGROUND_GRAY)
    mask = hits.triangle >= 0
    nc = _shading_normals(mesh, pose, hits, shading)
    img[mask] = 0.2 + 0.8 * np.maximum(0.0, nc @ (pose.view @ l))
    return img.reshape(n, n).astype(np.float32)


def chamfer_metric(a: TriMesh, b: TriMesh, samples: int = 10_000, seed: int = 0) -> float:
    """Symmetric squared Chamfer between ``samples`` surface samples of each mesh (same seed for both)."""
    from .deformfit.losses import chamfer_loss

    if a.n_triangles == 0 or b.n_triangles == 0:
        raise MeshError("chamfer_metric needs nonempty meshes")
    pa = sample_surface(a, samples, seed).points
    pb = sample_surface(b, samples, seed).points
    return float(chamfer_loss(pa, pb)[0])


# -- output -------------------------------------------------------------------


def save_png(image: np.ndarray | NormalMap, path: str | os.PathLike) -> None:
    """8-bit PNG of a normal map or a gray image with values in [0, 1]."""
    from PIL import Image

    data = image.rgb if isinstance(image, NormalMap) else np.asarray(image)
    img = np.clip(np.round(data * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, "RGB" if img.ndim == 3 else "L").save(path)


def encode_nrmf(rgb: np.ndarray) -> bytes:
    """``NRMF`` | u32 version | u32 H | u32 W | float32 LE row-major RGB."""
    rgb = np.asarray(rgb, dtype=np.float32)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError("NRMF payload must be H x W x 3")
    h, w, _ = rgb.shape
    return NRMF_MAGIC + struct.pack("<III", NRMF_VERSION, h, w) + np.ascontiguousarray(rgb, dtype="<f4").tobytes()


def decode_nrmf(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise FormatError("truncated NRMF header", offset=len(buf))
    if buf[:4] != NRMF_MAGIC:
        raise FormatError(f"bad NRMF magic {buf[:4]!r}", offset=0)
    version, h, w = struct.unpack_from("<III", buf, 4)
    if version != NRMF_VERSION:
        raise FormatError(f"unsupported NRMF version {version}", offset=4)
    if len(buf) != 16 + 12 * h * w:
        raise FormatError(f"NRMF payload size {len(buf) - 16} does not match {h} x {w}", offset=16)
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(h, w, 3).astype(np.float32)


def write_nrmf(image: np.ndarray | NormalMap, path: str | os.PathLike) -> None:
    data = image.rgb if isinstance(image, NormalMap) else np.asarray(image, np.float32)
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    Path(path).write_bytes(encode_nrmf(data))


def read_nrmf(path: str | os.PathLike) -> np.ndarray:
    return decode_nrmf(Path(path).read_bytes())
