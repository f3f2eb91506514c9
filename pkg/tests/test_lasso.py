from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vdmforge import lasso
from vdmforge.acceptance import bellman_ford
from vdmforge.errors import DataError, LassoError, MeshError, SeparationError
from vdmforge.meshcore import TriMesh
from vdmforge.meshcore.primitives import box, grid, icosphere, torus


def clip_nonempty(tris: np.ndarray, lo: np.ndarray, hi: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Sutherland-Hodgman: clip each triangle against its closed box, report a nonempty remainder."""
    n = len(tris)
    cap = 12
    poly = np.zeros((n, cap, 3))
    poly[:, :3] = tris
    cnt = np.full(n, 3)
    rows = np.arange(n)
    for axis in range(3):
        for bound, sign in ((lo, 1.0), (hi, -1.0)):
            out = np.zeros_like(poly)
            ocnt = np.zeros(n, dtype=np.int64)
            for i in range(cap):
                valid = i < cnt
                if not valid.any():
                    break
                cur = poly[:, i]
                nxt = poly[rows, np.where(i + 1 < cnt, i + 1, 0)]
                dc = sign * (cur[:, axis] - bound[:, axis])
                dn = sign * (nxt[:, axis] - bound[:, axis])
                keep = valid & (dc >= -eps)
                out[rows[keep], ocnt[keep]] = cur[keep]
                ocnt += keep
                cross = valid & (((dc >= -eps) & (dn < -eps)) | ((dc < -eps) & (dn >= -eps)))
                t = np.where(cross, dc / np.where(cross, dc - dn, 1.0), 0.0)
                pt = cur + (nxt - cur) * t[:, None]
                out[rows[cross], ocnt[cross]] = pt[cross]
                ocnt += cross
            poly, cnt = out, ocnt
    return cnt > 0


def brute_voxels(mesh: TriMesh, grid: lasso.VoxelGrid, candidates: np.ndarray | None = None) -> set[tuple[int, int, int]]:
    r, h, o = grid.resolution, grid.voxel_size, grid.origin
    if candidates is None:
        candidates = np.stack(np.meshgrid(*[np.arange(r)] * 3, indexing="ij"), -1).reshape(-1, 3)
    found = set()
    for t in mesh.corners:
        lo = o + h * candidates
        hi = lo + h
        # boxes disjoint from the triangle's bounding box cannot intersect it
        near = (lo <= t.max(0)).all(1) & (hi >= t.min(0)).all(1)
        c = candidates[near]
        hit = clip_nonempty(np.repeat(t[None], len(c), 0), lo[near], hi[near])
        found.update(map(tuple, c[hit].tolist()))
    return found


def slab(n: int = 16) -> lasso.VoxelGrid:
    return lasso.voxelize_surface(grid(n - 1), n)


def square_loop(lo: int, side: int) -> lasso.VoxelLoop:
    ring = ([(i, 0) for i in range(side)] + [(side, j) for j in range(side)]
            + [(side - i, side) for i in range(side)] + [(0, side - j) for j in range(side)])
    return lasso.VoxelLoop(np.array([(x + lo, y + lo, 0) for x, y in ring]))


# -- voxelization -----------------------------------------------------------------------


def test_unit_square_resolution_8():
    g = lasso.voxelize_surface(grid(1), 8)
    assert len(g) == 64
    assert set(map(tuple, g.voxels.tolist())) == brute_voxels(grid(1), g)


def test_degenerate_mesh_rejected():
    point_like = TriMesh([[0, 0, 0], [0, 0, 0], [0, 0, 0]], [[0, 1, 2]], check=False)
    with pytest.raises(MeshError):
        lasso.voxelize_surface(point_like, 16)


@pytest.mark.parametrize("r", [7, 1025])
def test_resolution_range(r):
    with pytest.raises((MeshError, LassoError, ValueError)):
        lasso.voxelize_surface(box(), r)


def test_icosphere_32_matches_clipping_oracle():
    mesh = icosphere(2)
    g = lasso.voxelize_surface(mesh, 32)
    assert set(map(tuple, g.voxels.tolist())) == brute_voxels(mesh, g)


def test_small_mesh_against_every_voxel():
    mesh = torus(1.0, 0.4, 8, 6)
    g = lasso.voxelize_surface(mesh, 10)
    assert set(map(tuple, g.voxels.tolist())) == brute_voxels(mesh, g)


@given(st.integers(0, 2**31 - 1))
def test_random_triangles_match_oracle(seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(0, 1, (12, 3))
    t = rng.choice(12, (4, 3), replace=True)
    t = t[(t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])]
    if not len(t):
        return
    mesh = TriMesh(v, t, check=False)
    if mesh.face_areas.min() < 1e-6:
        return
    g = lasso.voxelize_surface(mesh, int(rng.integers(8, 14)))
    assert set(map(tuple, g.voxels.tolist())) == brute_voxels(mesh, g)


def test_box_shell_count():
    g = lasso.voxelize_surface(box(), 64)
    assert len(g) == 64 ** 3 - 62 ** 3


# -- dense loops -------------------------------------------------------------------------------


def test_collinear_segment_length():
    g = slab()
    loop = lasso.dense_loop(g, [(0, 0, 0), (5, 0, 0), (5, 5, 0)])
    path, cost = lasso.shortest_voxel_path(g, (0, 0, 0), (5, 0, 0))
    assert len(path) == 6 and cost == 5.0
    assert loop.segment_costs[0] == 5.0
    # the closing segment is a pure diagonal
    assert abs(loop.segment_costs[2] - 5 * np.sqrt(2)) < 1e-12


def test_two_keypoints_rejected():
    with pytest.raises(LassoError):
        lasso.dense_loop(slab(), [(0, 0, 0), (5, 0, 0)])


def test_unoccupied_keypoint_rejected():
    with pytest.raises(LassoError, match="not occupied"):
        lasso.dense_loop(slab(), [(0, 0, 0), (5, 0, 3), (5, 5, 0)])


def test_no_path_between_components():
    two = TriMesh(np.concatenate([grid(1).vertices, grid(1).vertices + [0, 0, 1]]),
                  np.concatenate([grid(1).triangles, grid(1).triangles + 4]))
    g = lasso.voxelize_surface(two, 16)
    top = g.voxels[g.voxels[:, 2] == g.voxels[:, 2].max()][0]
    with pytest.raises(LassoError, match="no voxel path"):
        lasso.shortest_voxel_path(g, g.voxels[0], top)


def check_loop_invariants(grid: lasso.VoxelGrid, loop: lasso.VoxelLoop):
    v = loop.voxels
    step = np.abs(np.diff(np.vstack([v, v[:1]]), axis=0))
    assert (step.max(1) == 1).all()
    assert len({tuple(x) for x in v.tolist()}) == len(v)
    assert (grid.index_of(v) >= 0).all()
    assert abs(loop.cost - sum(loop.segment_costs)) < 1e-9


@given(st.integers(0, 2**31 - 1))
def test_paths_match_bellman_ford(seed):
    rng = np.random.default_rng(seed)
    base = icosphere(1)
    mesh = TriMesh(base.vertices * rng.uniform(0.7, 1.3, (base.n_vertices, 1)), base.triangles)
    g = lasso.voxelize_surface(mesh, int(rng.integers(8, 17)))
    a = int(rng.integers(len(g)))
    dist = bellman_ford(g.voxels, a)
    for b in rng.integers(len(g), size=4):
        path, cost = lasso.shortest_voxel_path(g, g.voxels[a], g.voxels[b])
        assert abs(cost - dist[b]) < 1e-9
        steps = np.abs(np.diff(path, axis=0))
        assert abs(np.sqrt(steps.sum(1)).sum() - cost) < 1e-9


@given(st.integers(0, 2**31 - 1))
def test_dense_loop_invariants(seed):
    rng = np.random.default_rng(seed)
    g = lasso.voxelize_surface(box((0, 0, 0), rng.uniform(0.5, 1.5, 3)), int(rng.integers(10, 24)))
    v = g.voxels
    mid = v[v[:, 2] == int(np.median(v[:, 2]))]
    ang = np.arctan2(mid[:, 1] - mid[:, 1].mean(), mid[:, 0] - mid[:, 0].mean())
    kp = mid[[np.argmin(np.abs(np.angle(np.exp(1j * (ang - a))))) for a in (-2.5, -0.5, 1.5)]]
    try:
        loop = lasso.dense_loop(g, kp)
    except LassoError:
        return
    check_loop_invariants(g, loop)


# -- flooding --------------------------------------------------------------------------------------------


@pytest.mark.parametrize("connectivity", [6, 26])
def test_slab_square_loop_inside(connectivity):
    g = slab()
    loop = square_loop(4, 6)
    region = lasso.flood_select(g, loop, (7, 7, 0), connectivity=connectivity)
    assert len(region) == 25 + len(loop)


def test_slab_seed_outside_escapes():
    g = slab()
    with pytest.raises(SeparationError):
        lasso.flood_select(g, square_loop(4, 6), (0, 0, 0))


def test_gap_in_loop_escapes():
    g = slab()
    loop = square_loop(4, 6)
    gapped = lasso.VoxelLoop(np.delete(loop.voxels, [2, 3, 4], axis=0))
    with pytest.raises(SeparationError):
        lasso.flood_select(g, gapped, (7, 7, 0))


def test_seed_on_loop_rejected():
    with pytest.raises(LassoError, match="on the loop"):
        lasso.flood_select(slab(), square_loop(4, 6), (4, 4, 0))


def test_bare_loop_leaks_on_voxel_shell():
    # the literal flood around the bare chain escapes through corner cuts; the barrier does not
    g = lasso.voxelize_surface(box(), 32)
    v = g.voxels
    mid = v[v[:, 2] == 16]
    kp = [mid[np.argmin(np.abs(mid - t).sum(1))] for t in ([0, 15, 16], [16, 0, 16], [31, 15, 16], [16, 31, 16])]
    loop = lasso.dense_loop(g, kp)
    top = v[np.argmax(v[:, 2])]
    with pytest.raises(SeparationError):
        lasso.flood_select(g, loop, top, barrier_radius=0)
    assert len(lasso.flood_select(g, loop, top)) < 0.6 * len(g)


@pytest.mark.parametrize("mesh", [box(), icosphere(3), box((0, 0, 0), (1.0, 0.6, 1.4))], ids=["cube", "sphere", "box"])
@pytest.mark.parametrize("connectivity", [6, 26])
def test_partition_property(mesh, connectivity):
    g = lasso.voxelize_surface(mesh, 32)
    v = g.voxels
    mid = v[v[:, 2] == int(round(v[:, 2].mean()))]
    c = mid.mean(0)
    ang = np.arctan2(mid[:, 1] - c[1], mid[:, 0] - c[0])
    kp = mid[[np.argmin(np.abs(np.angle(np.exp(1j * (ang - a))))) for a in (-3.0, -1.4, 0.2, 1.8)]]
    loop = lasso.dense_loop(g, kp)
    a = lasso.flood_select(g, loop, v[np.argmax(v[:, 2])], connectivity=connectivity)
    b = lasso.flood_select(g, loop, v[np.argmin(v[:, 2])], connectivity=connectivity)
    union = {tuple(x) for x in a.tolist()} | {tuple(x) for x in b.tolist()} | {tuple(x) for x in loop.voxels.tolist()}
    assert union == {tuple(x) for x in v.tolist()}


# -- part extraction -----------------------------------------------------------------------------------------


def test_extract_all_voxels_is_whole_mesh():
    s = icosphere(2)
    g = lasso.voxelize_surface(s, 24)
    part = lasso.extract_part(s, g.voxels, g)
    assert part.n_triangles == s.n_triangles


def test_extract_empty_region_rejected():
    s = icosphere(2)
    g = lasso.voxelize_surface(s, 24)
    with pytest.raises(LassoError):
        lasso.extract_part(s, np.zeros((0, 3), np.int64), g)


def test_half_space_region_matches_centroid_rule():
    s = icosphere(3)
    g = lasso.voxelize_surface(s, 24)
    region = g.voxels[g.voxels[:, 2] >= 12]
    part = lasso.extract_part(s, region, g)
    cz = np.floor((s.corners.mean(1)[:, 2] - g.origin[2]) / g.voxel_size)
    assert part.n_triangles == int((cz >= 12).sum())


def test_lasso_part_on_sphere_cap():
    s = icosphere(3)
    g = lasso.voxelize_surface(s, 32)
    v = g.voxels
    mid = v[v[:, 2] == 20]
    c = mid.mean(0)
    ang = np.arctan2(mid[:, 1] - c[1], mid[:, 0] - c[0])
    kp = mid[[np.argmin(np.abs(np.angle(np.exp(1j * (ang - a))))) for a in (-3.0, -1.0, 1.0)]]
    part = lasso.lasso_part(s, kp, v[np.argmax(v[:, 2])], 32)
    z = part.corners.mean(1)[:, 2]
    assert 0 < part.n_triangles < s.n_triangles / 2 and z.min() > 0


# -- keypoint files ------------------------------------------------------------------------------------------------


def test_keypoint_file_roundtrip(tmp_path):
    kf = lasso.KeypointFile(32, np.array([[1, 2, 3], [4, 5, 6], [7, 8, 9]]), np.array([1, 1, 1]))
    lasso.write_keypoints(kf, tmp_path / "k.json")
    back = lasso.read_keypoints(tmp_path / "k.json")
    assert back.resolution == 32 and np.array_equal(back.keypoints, kf.keypoints) and np.array_equal(back.seed, kf.seed)


@pytest.mark.parametrize("doc", [{"keypoints": [[1, 2, 3]]}, {"resolution": 8, "keypoints": [[1.5, 2, 3]]}, [1, 2]])
def test_bad_keypoint_files(tmp_path, doc):
    (tmp_path / "k.json").write_text(json.dumps(doc))
    with pytest.raises(DataError):
        lasso.read_keypoints(tmp_path / "k.json")
