from __future__ import annotations

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from vdmforge import fixtures, flatten, lasso, rendereval, vdm, winding
from vdmforge.cli import main
from vdmforge.deformfit import DeformField, FitConfig, SquareEmbedding, extract_vdm, fit, init_to_plane
from vdmforge.meshcore import OrientedPointSet, load_mesh, load_points, sample_surface, save_mesh, save_points
from vdmforge.meshcore.primitives import box, cylinder_patch, disk, icosphere

QUICK_FIT = {"epochs": 10, "grid_samples_per_step": 256, "target_samples_per_step": 512,
             "boundary_samples_per_step": 64, "target_pool_size": 4000, "eval_samples": 2500, "init_tolerance": 1e-2}


def stored(x: np.ndarray) -> np.ndarray:
    """Coordinates as binary PLY keeps them (float32)."""
    return np.asarray(x).astype(np.float32).astype(np.float64)


def run(*argv) -> int:
    return main([str(a) for a in argv])


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def error_json(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture
def sphere_file(tmp_path):
    save_mesh(icosphere(3), tmp_path / "sphere.ply")
    return tmp_path / "sphere.ply"


@pytest.fixture
def quick_config(tmp_path):
    p = tmp_path / "quick.json"
    p.write_text(json.dumps({"fit": QUICK_FIT}))
    return p


# -- thin wrappers ---------------------------------------------------------------------------------


def test_sample_matches_library(tmp_path, sphere_file):
    assert run("sample", sphere_file, "-o", tmp_path / "p.ply", "-n", 500, "--seed", 4) == 0
    got = load_points(tmp_path / "p.ply")
    want = sample_surface(load_mesh(sphere_file), 500, 4)
    assert np.array_equal(got.points, stored(want.points))


def test_sample_requires_seed(tmp_path, sphere_file, capsys):
    assert run("sample", sphere_file, "-o", tmp_path / "p.ply") == 2
    assert error_json(capsys)["error"] == "UsageError"


def test_filter_interior_matches_library(tmp_path, sphere_file):
    pts = sample_surface(box((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5)), 400, 1)
    pts = OrientedPointSet(np.concatenate([pts.points, pts.points * 0.3]), np.concatenate([pts.normals, pts.normals]))
    save_points(pts, tmp_path / "q.ply")
    assert run("filter-interior", tmp_path / "q.ply", sphere_file, "-o", tmp_path / "kept.ply") == 0
    got = load_points(tmp_path / "kept.ply")
    want = winding.filter_interior(load_points(tmp_path / "q.ply"), icosphere(3))
    assert np.array_equal(got.points, stored(want.points))
    assert len(got.points) == 400


def test_extract_part_matches_library(tmp_path, sphere_file):
    g = lasso.voxelize_surface(icosphere(3), 32)
    v = g.voxels
    mid = v[v[:, 2] == 20]
    c = mid.mean(0)
    ang = np.arctan2(mid[:, 1] - c[1], mid[:, 0] - c[0])
    kp = mid[[np.argmin(np.abs(np.angle(np.exp(1j * (ang - a))))) for a in (-3.0, -1.0, 1.0)]]
    seed = v[np.argmax(v[:, 2])]
    lasso.write_keypoints(lasso.KeypointFile(32, kp, seed), tmp_path / "k.json")
    assert run("extract-part", sphere_file, tmp_path / "k.json", "-o", tmp_path / "part.ply") == 0
    want = lasso.lasso_part(icosphere(3), kp, seed, 32)
    got = load_mesh(tmp_path / "part.ply")
    assert np.array_equal(got.triangles, want.triangles)
    assert np.array_equal(got.vertices, stored(want.vertices))


def test_extract_part_needs_seed_voxel(tmp_path, sphere_file, capsys):
    lasso.write_keypoints(lasso.KeypointFile(32, np.array([[1, 2, 3], [4, 5, 6], [7, 8, 9]])), tmp_path / "k.json")
    assert run("extract-part", sphere_file, tmp_path / "k.json", "-o", tmp_path / "part.ply") == 3
    assert "seed voxel" in error_json(capsys)["message"]


def bumpy_part():
    m = disk(0.25, 4, 16, height=lambda x, y: 0.1 * np.exp(-30 * (x * x + y * y)) + 0.02 * x)
    return m


def test_flatten_stitch_augment_match_library(tmp_path):
    save_mesh(bumpy_part(), tmp_path / "part.ply")
    part = load_mesh(tmp_path / "part.ply")
    assert run("flatten", tmp_path / "part.ply", "-o", tmp_path / "flat.ply") == 0
    flat, _ = flatten.flatten_part(part)
    assert np.array_equal(load_mesh(tmp_path / "flat.ply").vertices, stored(flat.vertices))

    assert run("stitch", tmp_path / "flat.ply", "-o", tmp_path / "tile.ply", "--tile-resolution", 32,
               "--smooth-iterations", 0, "--embedding-out", tmp_path / "emb.json") == 0
    flat = load_mesh(tmp_path / "flat.ply")
    want = flatten.stitch_to_square(flat, 32, 0.05)
    got = load_mesh(tmp_path / "tile.ply")
    assert np.array_equal(got.vertices, stored(want.vertices)) and np.array_equal(got.triangles, want.triangles)
    emb = json.loads((tmp_path / "emb.json").read_text())
    assert emb["side"] == 1.0

    assert run("augment", tmp_path / "flat.ply", "-o", tmp_path / "aug.ply", "--scale", 1.2, "--rotate", 90) == 0
    want = flatten.augment(flat, (0, 0), 1.2, np.pi / 2)
    assert np.array_equal(load_mesh(tmp_path / "aug.ply").vertices, stored(want.vertices))


def test_augment_random_needs_seed_and_is_deterministic(tmp_path, capsys):
    flat, _ = flatten.flatten_part(bumpy_part())
    save_mesh(flat, tmp_path / "flat.ply")
    assert run("augment", tmp_path / "flat.ply", "-o", tmp_path / "a.ply", "--random") == 2
    capsys.readouterr()
    for name in ("a1.ply", "a2.ply"):
        assert run("augment", tmp_path / "flat.ply", "-o", tmp_path / name, "--random", "--seed", 7) == 0
    assert digest(tmp_path / "a1.ply") == digest(tmp_path / "a2.ply")


def test_apply_vdm_zero_keeps_base(tmp_path):
    base = cylinder_patch()
    save_mesh(base, tmp_path / "base.ply")
    vdm.write_vdm(vdm.VdmImage.zeros(32), tmp_path / "z.vdmf")
    assert run("apply-vdm", tmp_path / "z.vdmf", "--base", tmp_path / "base.ply", "-o", tmp_path / "out.ply") == 0
    out = load_mesh(tmp_path / "out.ply")
    assert np.abs(out.vertices - load_mesh(tmp_path / "base.ply").vertices).max() <= 1e-9


def test_apply_vdm_plane_matches_library(tmp_path):
    img = vdm.VdmImage(np.random.default_rng(0).normal(0, 0.05, (16, 16, 3)).astype(np.float32))
    vdm.write_vdm(img, tmp_path / "r.vdmf")
    assert run("apply-vdm", tmp_path / "r.vdmf", "--subdivision", 20, "-o", tmp_path / "out.ply") == 0
    want = vdm.apply_to_plane(img, 20)
    got = load_mesh(tmp_path / "out.ply")
    assert np.array_equal(got.triangles, want.triangles)
    assert np.abs(got.vertices - want.vertices).max() <= 1e-6


def test_render_matches_library(tmp_path, sphere_file):
    assert run("render", sphere_file, "--outdir", tmp_path / "r", "--resolution", 24, "--width", 2.4) == 0
    files = sorted((tmp_path / "r").glob("*.nrmf"))
    assert len(files) == 6 and len(list((tmp_path / "r").glob("*.png"))) == 6
    mesh = load_mesh(sphere_file)
    pose = rendereval.standard_poses("generation", 2.4, 24, mesh.vertices.mean(0))[0]
    want = rendereval.render_normals(mesh, pose)
    assert rendereval.read_nrmf(files[0]).tobytes() == want.rgb.tobytes()


def test_fixture_command(tmp_path):
    assert run("fixture", "bump", "-o", tmp_path / "b.ply", "-n", 16) == 0
    got = load_mesh(tmp_path / "b.ply")
    assert np.array_equal(got.vertices, stored(fixtures.bump_mesh(16).vertices))


def test_fit_vdm_matches_library(tmp_path, quick_config):
    save_mesh(fixtures.bump_mesh(32), tmp_path / "bump.ply")
    assert run("--config", quick_config, "fit-vdm", tmp_path / "bump.ply", "-o", tmp_path / "a.vdmf",
               "--seed", 2, "--resolution", 16) == 0
    cfg = FitConfig(seed=2, **QUICK_FIT)
    emb = SquareEmbedding()
    field = init_to_plane(DeformField(seed=2), emb, cfg)
    field, _ = fit(field, load_mesh(tmp_path / "bump.ply"), emb, cfg)
    want = extract_vdm(field, emb, 16, source="bump.ply", seed=2)
    assert vdm.read_vdm(tmp_path / "a.vdmf") == want
    rep = json.loads((tmp_path / "a.vdmf.report.json").read_text())
    assert rep["config"]["epochs"] == 10 and "wall_time_s" not in rep


# -- records, config, errors ---------------------------------------------------------------------------


def test_run_record_hashes(tmp_path, sphere_file):
    assert run("sample", sphere_file, "-o", tmp_path / "p.ply", "-n", 50, "--seed", 1) == 0
    rec = json.loads((tmp_path / "p.ply.run.json").read_text())
    assert rec["command"] == "sample"
    assert rec["inputs"][str(sphere_file)] == digest(sphere_file)
    assert rec["outputs"][str(tmp_path / "p.ply")] == digest(tmp_path / "p.ply")
    assert rec["config"] == {"count": 50, "seed": 1}
    assert "total" in rec["timings"] and "sample" in rec["timings"]


def test_record_path_flag(tmp_path, sphere_file):
    assert run("--record", tmp_path / "rec.json", "sample", sphere_file, "-o", tmp_path / "p.ply", "-n", 5, "--seed", 1) == 0
    assert (tmp_path / "rec.json").exists() and not (tmp_path / "p.ply.run.json").exists()


def test_config_precedence(tmp_path, sphere_file):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 3, "sample": {"count": 40}}))
    assert run("--config", tmp_path / "c.json", "sample", sphere_file, "-o", tmp_path / "a.ply") == 0
    rec = json.loads((tmp_path / "a.ply.run.json").read_text())
    assert rec["config"] == {"count": 40, "seed": 3}
    assert run("--config", tmp_path / "c.json", "sample", sphere_file, "-o", tmp_path / "b.ply", "-n", 7) == 0
    rec = json.loads((tmp_path / "b.ply.run.json").read_text())
    assert rec["config"] == {"count": 7, "seed": 3}


def test_config_unknown_section_key(tmp_path, sphere_file, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"sample": {"bogus": 1}}))
    assert run("--config", tmp_path / "c.json", "sample", sphere_file, "-o", tmp_path / "a.ply", "--seed", 1) == 2
    assert "bogus" in error_json(capsys)["message"]


def test_exit_codes(tmp_path, capsys):
    assert run("no-such-command") == 2
    assert error_json(capsys)["exit_code"] == 2
    assert run("flatten", tmp_path / "missing.ply", "-o", tmp_path / "x.ply") == 3
    err = error_json(capsys)
    assert err["exit_code"] == 3 and "missing.ply" in err["message"]
    (tmp_path / "bad.vdmf").write_bytes(b"NOPE" + bytes(20))
    assert run("apply-vdm", tmp_path / "bad.vdmf", "-o", tmp_path / "x.ply") == 3
    assert error_json(capsys)["error"] == "VdmFormatError"


def test_numerical_failure_exit_code(tmp_path, capsys):
    save_mesh(fixtures.flat_square(4), tmp_path / "sq.ply")
    (tmp_path / "c.json").write_text(json.dumps({"fit": {**QUICK_FIT, "init_max_epochs": 1, "init_check_every": 1,
                                                          "init_tolerance": 1e-12}}))
    assert run("--config", tmp_path / "c.json", "fit-vdm", tmp_path / "sq.ply", "-o", tmp_path / "x.vdmf", "--seed", 0) == 4
    assert error_json(capsys)["error"] == "ConvergenceError"


def test_threads_validation(tmp_path, sphere_file, monkeypatch, capsys):
    assert run("--threads", 0, "sample", sphere_file, "-o", tmp_path / "a.ply", "--seed", 1) == 2
    monkeypatch.setenv("VDMFORGE_THREADS", "x")
    assert run("sample", sphere_file, "-o", tmp_path / "a.ply", "--seed", 1) == 2
    monkeypatch.setenv("VDMFORGE_THREADS", "1")
    assert run("sample", sphere_file, "-o", tmp_path / "a.ply", "--seed", 1, "-n", 5) == 0
    assert json.loads((tmp_path / "a.ply.run.json").read_text())["threads"] == 1


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "vdmforge.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("vdmforge ")


# -- manifest ------------------------------------------------------------------------------------------------


def test_manifest_quick(tmp_path):
    save_mesh(bumpy_part(), tmp_path / "part.ply")
    man = {"seed": 1, "output": "out", "vdm_resolution": 16, "fit": QUICK_FIT,
           "stitch": {"tile_resolution": 24}, "render": {"resolution": 16, "poses": "generation"},
           "items": [{"id": "p", "mesh": "part.ply"}]}
    (tmp_path / "m.json").write_text(json.dumps(man))
    assert run("run", tmp_path / "m.json") == 0
    out = tmp_path / "out" / "p"
    for name in ("flat.ply", "tile.ply", "shape.vdmf", "report.json", "applied.ply"):
        assert (out / name).exists()
    assert len(list((out / "renders").glob("*.png"))) == 6
    rec = json.loads((tmp_path / "out" / "manifest.run.json").read_text())
    assert rec["outputs"][str(out / "shape.vdmf")] == digest(out / "shape.vdmf")
    assert rec["results"]["p"]["epochs_run"] == 10


def test_manifest_unknown_key(tmp_path, capsys):
    (tmp_path / "m.json").write_text(json.dumps({"seed": 1, "items": [{"mesh": "a.ply", "colour": 1}]}))
    assert run("run", tmp_path / "m.json") == 3
    assert "colour" in error_json(capsys)["message"]


@pytest.mark.slow
def test_manifest_over_bump_fixture(tmp_path):
    save_mesh(fixtures.bump_mesh(256), tmp_path / "bump.ply")
    fit_cfg = {"epochs": 300, "grid_samples_per_step": 24 * 24, "target_samples_per_step": 2048,
               "boundary_samples_per_step": 256}
    man = {"seed": 1, "vdm_resolution": 64, "fit": fit_cfg, "render": {"poses": None},
           "items": [{"id": "bump", "mesh": "bump.ply", "flatten": False, "stitch": False}]}
    (tmp_path / "m.json").write_text(json.dumps(man))
    assert run("run", tmp_path / "m.json") == 0
    rep = json.loads((tmp_path / "out" / "bump" / "report.json").read_text())
    assert rep["final_chamfer"] < 1e-4
