"""Vector displacement map images: sampling, application and the ``.vdmf`` format.

``.vdmf`` layout (all little endian)::

    0   4 bytes   magic b"VDMF"
    4   u32       version (1)
    8   u32       resolution R
    12  f32[3R^2] pixel (i, j) at offset 12 + 12 * (j * R + i), channels t, b, n
    ..  u32       metadata length L
    ..  L bytes   UTF-8 JSON metadata (sorted keys, compact separators)

Pixel (i, j) covers uv ((i + 0.5) / R, (j + 0.5) / R); displacements are in
units of the tile side.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike

from .errors import DataError, MeshError, VdmFormatError
from .meshcore import TriMesh
from .meshcore.primitives import grid_triangles

MAGIC = b"VDMF"
VERSION = 1
_SNAP = 1e-9


@dataclass(frozen=True, eq=False)
class VdmImage:
    """R x R grid of (t, b, n) displacements; ``data[j, i]`` is pixel (i, j)."""

    data: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float32)
        if d.ndim != 3 or d.shape[0] != d.shape[1] or d.shape[2] != 3:
            raise DataError(f"VDM data must be (R, R, 3), got {d.shape}")
        if not np.isfinite(d).all():
            raise DataError("VDM contains non-finite values")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def resolution(self) -> int:
        return self.data.shape[0]

    @classmethod
    def zeros(cls, resolution: int) -> "VdmImage":
        return cls(np.zeros((resolution, resolution, 3), np.float32))

    @classmethod
    def constant(cls, resolution: int, value: ArrayLike) -> "VdmImage":
        return cls(np.broadcast_to(np.asarray(value, np.float32), (resolution, resolution, 3)))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, VdmImage)
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and self.metadata == other.metadata
        )


def _bilinear(data: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Interpolate ``data`` at continuous pixel coordinates (x = column, y = row)."""
    r = data.shape[0]
    x = np.clip(x, 0.0, r - 1)
    y = np.clip(y, 0.0, r - 1)

    def split(c):
        i0 = np.floor(c).astype(np.int64)
        f = c - i0
        # land exactly on a pixel centre when within rounding of one
        up = f > 1 - _SNAP
        i0 = np.where(up, i0 + 1, i0)
        f = np.where(up | (f < _SNAP), 0.0, f)
        i0 = np.minimum(i0, r - 1)
        i1 = np.minimum(i0 + 1, r - 1)
        return i0, i1, f

    i0, i1, fx = split(x)
    j0, j1, fy = split(y)
    d = data.astype(np.float64)
    fx = fx[:, None]
    fy = fy[:, None]
    top = d[j0, i0] * (1 - fx) + d[j0, i1] * fx
    bot = d[j1, i0] * (1 - fx) + d[j1, i1] * fx
    return top * (1 - fy) + bot * fy


def sample(vdm: VdmImage, uv: ArrayLike) -> np.ndarray:
    """Bilinear displacement at ``uv`` (a pair or an (N, 2) array).

    Coordinates outside [0, 1]^2 are clamped, and values between the border
    and the outermost pixel centres repeat the border pixels.
    """
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    uv = np.clip(uv.reshape(-1, 2), 0.0, 1.0)
    r = vdm.resolution
    out = _bilinear(vdm.data, uv[:, 0] * r - 0.5, uv[:, 1] * r - 0.5)
    return out[0] if single else out


def resample(vdm: VdmImage, new_resolution: int) -> VdmImage:
    if not 16 <= new_resolution <= 4096:
        raise DataError("new resolution must lie in [16, 4096]")
    r, n = vdm.resolution, new_resolution
    # old-pixel coordinate of new centre k: ((2k + 1) r - n) / (2n), exact when r == n
    c = ((2 * np.arange(n) + 1) * r - n) / (2 * n)
    x, y = np.meshgrid(c, c, indexing="xy")
    out = _bilinear(vdm.data, x.ravel(), y.ravel()).reshape(n, n, 3)
    return VdmImage(out.astype(np.float32), dict(vdm.metadata))


def plane_grid_uv(subdivision: int) -> np.ndarray:
    """Cell-centred S x S uv lattice, row-major in v; matches pixel centres when S == R."""
    c = (np.arange(subdivision) + 0.5) / subdivision
    u, v = np.meshgrid(c, c, indexing="xy")
    return np.stack([u.ravel(), v.ravel()], 1)


def apply_to_plane(vdm: VdmImage, subdivision: int) -> TriMesh:
    """Displace a flat S x S vertex grid on the unit square (t=+x, b=+y, n=+z)."""
    if subdivision < 2:
        raise DataError("subdivision must be >= 2")
    uv = plane_grid_uv(subdivision)
    base = np.column_stack([uv, np.zeros(len(uv))])
    verts = base + sample(vdm, uv)
    return TriMesh(verts, grid_triangles(subdivision, subdivision), uvs=uv)


def tangent_frames(mesh: TriMesh, vertex_ids: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-vertex orthonormal (T, B, N) from UV derivatives.

    T and B are area-weighted sums of the per-triangle dP/du and dP/dv, then
    Gram-Schmidt orthonormalised against the vertex normal N (stored normals
    when present). Raises :class:`MeshError` listing requested vertices whose
    incident triangles all have zero UV area.
    """
    if mesh.uvs is None:
        raise MeshError("tangent frames need per-vertex UVs")
    c = mesh.corners
    w = mesh.uvs[mesh.triangles]
    e1, e2 = c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]
    du1, dv1 = w[:, 1, 0] - w[:, 0, 0], w[:, 1, 1] - w[:, 0, 1]
    du2, dv2 = w[:, 2, 0] - w[:, 0, 0], w[:, 2, 1] - w[:, 0, 1]
    det = du1 * dv2 - du2 * dv1
    ok = np.abs(det) > 1e-14
    inv = np.divide(1.0, det, out=np.zeros_like(det), where=ok)
    area = mesh.face_areas * ok
    tu = (e1 * dv2[:, None] - e2 * dv1[:, None]) * (inv * area)[:, None]
    tv = (e2 * du1[:, None] - e1 * du2[:, None]) * (inv * area)[:, None]
    T = np.zeros_like(mesh.vertices)
    B = np.zeros_like(mesh.vertices)
    support = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(T, mesh.triangles[:, k], tu)
        np.add.at(B, mesh.triangles[:, k], tv)
        np.add.at(support, mesh.triangles[:, k], area)
    ids = np.arange(mesh.n_vertices) if vertex_ids is None else np.asarray(vertex_ids)
    bad = ids[support[ids] <= 0]
    if len(bad):
        raise MeshError(f"degenerate UV frame at vertices {bad[:20].tolist()}")
    N = mesh.vertex_normals()
    T = T - N * np.einsum("ij,ij->i", T, N)[:, None]
    T /= np.maximum(np.linalg.norm(T, axis=1, keepdims=True), 1e-300)
    B = B - N * np.einsum("ij,ij->i", B, N)[:, None] - T * np.einsum("ij,ij->i", B, T)[:, None]
    B /= np.maximum(np.linalg.norm(B, axis=1, keepdims=True), 1e-300)
    return T, B, N


def apply_to_mesh(vdm: VdmImage, base: TriMesh, region=(0.0, 0.0, 1.0, 1.0), amplitude: float = 1.0) -> TriMesh:
    """Stamp ``vdm`` onto the vertices of ``base`` whose uv lies in ``region`` (u0, v0, u1, v1).

    Each affected vertex moves by amplitude * (d_t T + d_b B + d_n N), with d
    sampled at the rectangle-normalised uv and (T, B, N) from
    :func:`tangent_frames`.
    """
    if base.uvs is None:
        raise MeshError("apply_to_mesh needs a base mesh with UVs")
    u0, v0, u1, v1 = (float(x) for x in region)
    if not (u1 > u0 and v1 > v0):
        raise DataError("region must have positive extent")
    uv = base.uvs
    inside = np.flatnonzero((uv[:, 0] >= u0) & (uv[:, 0] <= u1) & (uv[:, 1] >= v0) & (uv[:, 1] <= v1))
    if not len(inside):
        return base
    local = (uv[inside] - [u0, v0]) / [u1 - u0, v1 - v0]
    d = sample(vdm, local)
    if not d.any():
        return base
    T, B, N = tangent_frames(base, inside)
    disp = d[:, :1] * T[inside] + d[:, 1:2] * B[inside] + d[:, 2:] * N[inside]
    verts = base.vertices.copy()
    verts[inside] += amplitude * disp
    return base.replace(vertices=verts)


def _meta_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode_vdm(vdm: VdmImage) -> bytes:
    r = vdm.resolution
    meta = _meta_bytes(vdm.metadata)
    payload = np.ascontiguousarray(vdm.data, dtype="<f4").tobytes()
    return MAGIC + struct.pack("<II", VERSION, r) + payload + struct.pack("<I", len(meta)) + meta


def decode_vdm(buf: bytes) -> VdmImage:
    if len(buf) < 12:
        raise VdmFormatError("truncated header", offset=len(buf))
    if buf[:4] != MAGIC:
        raise VdmFormatError(f"bad magic {buf[:4]!r}", offset=0)
    version, r = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise VdmFormatError(f"unsupported version {version}", offset=4)
    if r < 1:
        raise VdmFormatError("zero resolution", offset=8)
    end = 12 + 12 * r * r
    if len(buf) < end + 4:
        raise VdmFormatError(f"truncated payload: need {end + 4} bytes, have {len(buf)}", offset=len(buf))
    data = np.frombuffer(buf, dtype="<f4", count=3 * r * r, offset=12).reshape(r, r, 3)
    if not np.isfinite(data).all():
        bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
        raise VdmFormatError("non-finite pixel value", offset=12 + 4 * bad)
    (n,) = struct.unpack_from("<I", buf, end)
    if len(buf) != end + 4 + n:
        raise VdmFormatError(f"metadata block length {n} does not match file size", offset=end)
    try:
        meta = json.loads(buf[end + 4:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VdmFormatError(f"bad metadata JSON: {exc}", offset=end + 4) from None
    return VdmImage(data.astype(np.float32), meta)


def write_vdm(vdm: VdmImage, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_vdm(vdm))


def read_vdm(path: str | os.PathLike) -> VdmImage:
    return decode_vdm(Path(path).read_bytes())


def save_preview(vdm: VdmImage, path: str | os.PathLike, scale: float | None = None) -> None:
    """8-bit RGB preview mapping [-scale, scale] to [0, 255] (row 0 at the top = v = 1)."""
    from PIL import Image

    s = scale or max(float(np.abs(vdm.data).max()), 1e-12)
    img = np.clip((vdm.data[::-1] / s + 1) * 127.5, 0, 255).round().astype(np.uint8)
    Image.fromarray(img, "RGB").save(path)
