"""Command-line driver: every pipeline stage as a subcommand, plus a manifest runner.

Option precedence is built-in defaults < ``--config`` JSON < command-line
flags. A config file is a JSON object whose top-level keys set options of
any subcommand that has them, and whose ``"<subcommand>"`` sections set
options of that subcommand only. ``fit-vdm`` and ``run`` also accept a
``"fit"`` object with :class:`~vdmforge.deformfit.FitConfig` fields.

Every successful command writes a run record (JSON) next to its primary
output, or to ``--record``. Errors are printed to stderr as one JSON object
and mapped to exit codes 2 (usage), 3 (data) and 4 (numerical).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, fixtures, flatten, lasso, rendereval, vdm, winding
from .deformfit import DeformField, FitConfig, SquareEmbedding, extract_vdm, fit, init_to_plane
from .errors import DataError, NumericalError, VdmForgeError
from .meshcore import OrientedPointSet, TriMesh, load_mesh, load_points, sample_surface, save_mesh, save_points

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers --------------------------------------------------------------------


def sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"input file not found: {p}")
    return p


class RunRecord:
    """Collects inputs, outputs, config and stage timings of one command."""

    def __init__(self, command: str, argv: list[str]):
        self.doc = {
            "command": command,
            "argv": list(argv),
            "version": __version__,
            "inputs": {},
            "outputs": {},
            "config": {},
            "timings": {},
            "results": {},
        }
        self._t0 = time.perf_counter()

    def input(self, path) -> Path:
        p = _existing(path)
        self.doc["inputs"][str(p)] = sha256(p)
        return p

    def output(self, path) -> None:
        self.doc["outputs"][str(path)] = sha256(path)

    def time(self, stage: str, seconds: float) -> None:
        self.doc["timings"][stage] = round(seconds, 6)

    def write(self, path) -> None:
        self.doc["timings"]["total"] = round(time.perf_counter() - self._t0, 6)
        Path(path).write_text(json.dumps(self.doc, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer, np.floating)):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


class _Timer:
    def __init__(self, rec: RunRecord, stage: str):
        self.rec, self.stage = rec, stage

    def __enter__(self):
        self.t = time.perf_counter()

    def __exit__(self, *exc):
        self.rec.time(self.stage, time.perf_counter() - self.t)


def _load_target(path: Path) -> TriMesh | OrientedPointSet:
    """A mesh file with triangles is a mesh target, otherwise an oriented point set."""
    try:
        return load_mesh(path)
    except DataError:
        return load_points(path)


def _embedding(path) -> SquareEmbedding:
    if path is None:
        return SquareEmbedding()
    try:
        return SquareEmbedding.from_dict(json.loads(Path(path).read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: bad embedding JSON ({exc})") from None


def _stitch_embedding(res: flatten.StitchResult) -> SquareEmbedding:
    return SquareEmbedding(plane=res.plane, side=1.0, center=res.center)


def _fit_config(args, fit_overrides: dict) -> FitConfig:
    d = dict(fit_overrides)
    for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("grid_samples", "grid_samples_per_step"),
                      ("target_samples", "target_samples_per_step"), ("boundary_samples", "boundary_samples_per_step"),
                      ("eval_every", "eval_every"), ("target_chamfer", "target_chamfer")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    d["seed"] = args.seed
    return FitConfig.from_dict(d)


def _record_path(args, primary) -> Path:
    return Path(args.record) if args.record else Path(str(primary) + ".run.json")


# -- subcommands ------------------------------------------------------------------


def cmd_sample(args, rec: RunRecord):
    mesh = load_mesh(rec.input(args.mesh))
    with _Timer(rec, "sample"):
        pts = sample_surface(mesh, args.count, args.seed)
    save_points(pts, args.output)
    rec.output(args.output)
    rec.doc["config"] = {"count": args.count, "seed": args.seed}
    return args.output


def cmd_filter_interior(args, rec: RunRecord):
    pts = load_points(rec.input(args.points))
    mesh = load_mesh(rec.input(args.mesh))
    with _Timer(rec, "winding"):
        kept = winding.filter_interior(pts, mesh, args.threshold, accelerated=not args.exact)
    save_points(kept, args.output)
    rec.output(args.output)
    rec.doc["config"] = {"threshold": args.threshold, "exact": args.exact}
    rec.doc["results"] = {"points_in": len(pts.points), "points_kept": len(kept.points)}
    return args.output


def _seed_voxel(args, kf: lasso.KeypointFile) -> np.ndarray:
    if args.seed_voxel is not None:
        return np.asarray(args.seed_voxel, dtype=np.int64)
    if kf.seed is None:
        raise DataError("no seed voxel: pass --seed-voxel or add 'seed' to the keypoint file")
    return kf.seed


def cmd_extract_part(args, rec: RunRecord):
    mesh = load_mesh(rec.input(args.mesh))
    kf = lasso.read_keypoints(rec.input(args.keypoints))
    resolution = args.resolution or kf.resolution
    with _Timer(rec, "lasso"):
        part = lasso.lasso_part(mesh, kf.keypoints, _seed_voxel(args, kf), resolution, args.connectivity)
    save_mesh(part, args.output)
    rec.output(args.output)
    rec.doc["config"] = {"resolution": resolution, "connectivity": args.connectivity}
    rec.doc["results"] = {"triangles": part.n_triangles}
    return args.output


def cmd_flatten(args, rec: RunRecord):
    part = load_mesh(rec.input(args.part))
    with _Timer(rec, "flatten"):
        flat, plane = flatten.flatten_part(part)
    save_mesh(flat, args.output)
    rec.output(args.output)
    rec.doc["results"] = {"plane_normal": plane.normal, "plane_offset": float(plane.normal @ plane.origin)}
    return args.output


def _stitch(part: TriMesh, args) -> flatten.StitchResult:
    res = flatten.stitch_to_square(part, args.tile_resolution, args.margin, return_seam=True)
    if args.smooth_iterations > 0:
        mesh = flatten.smooth_seam(res.mesh, res.seam, args.smooth_rings, args.smooth_iterations, args.smooth_lambda)
        res = flatten.StitchResult(mesh, res.hole_loop, res.part_loop, res.plane, res.center)
    return res


def cmd_stitch(args, rec: RunRecord):
    part = load_mesh(rec.input(args.patch))
    with _Timer(rec, "stitch"):
        res = _stitch(part, args)
    save_mesh(res.mesh, args.output)
    rec.output(args.output)
    emb = _stitch_embedding(res)
    if args.embedding_out:
        Path(args.embedding_out).write_text(json.dumps(emb.to_dict(), indent=1) + "\n")
        rec.output(args.embedding_out)
    rec.doc["config"] = {"tile_resolution": args.tile_resolution, "margin": args.margin,
                         "smooth_rings": args.smooth_rings, "smooth_iterations": args.smooth_iterations,
                         "smooth_lambda": args.smooth_lambda}
    rec.doc["results"] = {"embedding": emb.to_dict(), "seam_vertices": len(res.seam)}
    return args.output


def cmd_augment(args, rec: RunRecord):
    part = load_mesh(rec.input(args.part))
    tr = np.asarray(args.translate, float)
    scale, rot = args.scale, np.deg2rad(args.rotate)
    if args.random:
        if args.seed is None:
            raise UsageError("augment --random requires --seed")
        rng = np.random.Generator(np.random.Philox(args.seed))
        tr = rng.uniform(-args.max_translate, args.max_translate, 2)
        scale = float(np.exp(rng.uniform(-np.log(args.max_scale), np.log(args.max_scale))))
        rot = float(rng.uniform(-np.pi, np.pi))
    with _Timer(rec, "augment"):
        out = flatten.augment(part, tr, scale, rot, margin=args.margin)
    save_mesh(out, args.output)
    rec.output(args.output)
    rec.doc["config"] = {"translation": tr, "scale": scale, "rotation_rad": rot, "seed": args.seed}
    return args.output


def _fit_pipeline(target, emb: SquareEmbedding, config: FitConfig, rec: RunRecord, resolution: int, source: str):
    with _Timer(rec, "init"):
        field = init_to_plane(DeformField(seed=config.seed), emb, config)
    with _Timer(rec, "fit"):
        field, report = fit(field, target, emb, config)
    with _Timer(rec, "extract"):
        image = extract_vdm(field, emb, resolution, source=source, seed=config.seed)
    return image, report


def _write_report(report, path) -> None:
    # wall time is the only nondeterministic field; it lives in the run record instead
    d = report.to_dict()
    d.pop("wall_time_s", None)
    Path(path).write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")


def cmd_fit_vdm(args, rec: RunRecord):
    target = _load_target(rec.input(args.target))
    emb = _embedding(rec.input(args.embedding) if args.embedding else None)
    config = _fit_config(args, args._fit_overrides)
    rec.doc["config"] = {"fit": config.to_dict(), "resolution": args.resolution, "embedding": emb.to_dict()}
    image, report = _fit_pipeline(target, emb, config, rec, args.resolution, Path(args.target).name)
    vdm.write_vdm(image, args.output)
    rec.output(args.output)
    report_path = args.report or str(args.output) + ".report.json"
    _write_report(report, report_path)
    rec.output(report_path)
    rec.doc["results"] = {"final_chamfer": report.final_chamfer, "final_chamfer_p2p": report.final_chamfer_p2p,
                          "epochs_run": report.epochs_run}
    return args.output


def cmd_apply_vdm(args, rec: RunRecord):
    image = vdm.read_vdm(rec.input(args.vdm))
    with _Timer(rec, "apply"):
        if args.base:
            base = load_mesh(rec.input(args.base))
            out = vdm.apply_to_mesh(image, base, tuple(args.region), args.amplitude)
        else:
            out = vdm.apply_to_plane(image, args.subdivision)
    save_mesh(out, args.output)
    rec.output(args.output)
    rec.doc["config"] = {"region": args.region, "amplitude": args.amplitude, "subdivision": args.subdivision}
    return args.output


def _render_all(mesh: TriMesh, outdir: Path, args, rec: RunRecord, stem: str = "view") -> list[Path]:
    outdir.mkdir(parents=True, exist_ok=True)
    center = mesh.vertices.mean(0) if args.center is None else np.asarray(args.center, float)
    poses = rendereval.standard_poses(args.poses, args.width, args.resolution, center)
    written = []
    for k, pose in enumerate(poses):
        name = f"{stem}_{k:02d}_el{pose.elevation:+g}_az{pose.azimuth:+g}"
        if args.mode == "normals":
            img = rendereval.render_normals(mesh, pose, shading=args.shading)
        else:
            img = rendereval.render_gray(mesh, pose, shading=args.shading)
        png, raw = outdir / f"{name}.png", outdir / f"{name}.nrmf"
        rendereval.save_png(img, png)
        rendereval.write_nrmf(img, raw)
        for p in (png, raw):
            rec.output(p)
            written.append(p)
    return written


def cmd_render(args, rec: RunRecord):
    mesh = load_mesh(rec.input(args.mesh))
    outdir = Path(args.outdir)
    with _Timer(rec, "render"):
        _render_all(mesh, outdir, args, rec)
    rec.doc["config"] = {"poses": args.poses, "width": args.width, "resolution": args.resolution,
                         "mode": args.mode, "shading": args.shading}
    return outdir / "render"


def cmd_fixture(args, rec: RunRecord):
    if args.name == "bump":
        mesh = fixtures.bump_mesh(args.n)
    else:
        mesh = fixtures.flat_square(args.n)
    save_mesh(mesh, args.output)
    rec.output(args.output)
    rec.doc["config"] = {"name": args.name, "n": args.n}
    return args.output


def cmd_selftest(args, rec: RunRecord):
    from . import acceptance

    results = acceptance.run_all(only=args.only, quick=args.quick, stream=sys.stdout)
    rec.doc["results"] = {str(r.number): r.to_dict() for r in results}
    if args.record:
        rec.write(args.record)
    if not all(r.passed for r in results):
        raise NumericalError(f"{sum(not r.passed for r in results)} acceptance criteria failed")
    return None


MANIFEST_KEYS = {"seed", "output", "items", "fit", "vdm_resolution", "render", "stitch"}
ITEM_KEYS = {"id", "mesh", "keypoints", "seed_voxel", "resolution", "flatten", "stitch", "embedding"}


def cmd_run(args, rec: RunRecord):
    """Run extract -> flatten -> stitch -> fit -> VDM -> render for every manifest item.

    Paths in the manifest are relative to the manifest file. Surface
    reconstruction of the stitched part is outside this tool, so the stitched
    tile itself is the fit target.
    """
    mpath = rec.input(args.manifest)
    try:
        man = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}: invalid JSON ({exc})") from None
    if not isinstance(man, dict) or not isinstance(man.get("items"), list) or not man["items"]:
        raise DataError("manifest must be an object with a nonempty 'items' list")
    unknown = set(man) - MANIFEST_KEYS
    if unknown:
        raise DataError(f"unknown manifest keys: {sorted(unknown)}")
    base = mpath.parent
    seed = args.seed if args.seed is not None else man.get("seed")
    if seed is None:
        raise UsageError("run requires --seed or a manifest 'seed'")
    out_root = Path(args.output or base / man.get("output", "out"))
    out_root.mkdir(parents=True, exist_ok=True)
    fit_cfg = {**args._fit_overrides, **man.get("fit", {})}
    args.seed = int(seed)
    config = _fit_config(args, fit_cfg)
    resolution = int(man.get("vdm_resolution", 256))
    stitch_opts = {"tile_resolution": 64, "margin": 0.05, "smooth_rings": 2, "smooth_iterations": 3, "smooth_lambda": 0.5,
                   **man.get("stitch", {})}
    render_opts = {"poses": "generation", "width": 1.2, "resolution": 320, "mode": "normals", "shading": "flat",
                   "center": None, **man.get("render", {})}
    rec.doc["config"] = {"fit": config.to_dict(), "vdm_resolution": resolution, "stitch": stitch_opts, "render": render_opts}
    summary = {}
    for n, item in enumerate(man["items"]):
        unknown = set(item) - ITEM_KEYS
        if unknown:
            raise DataError(f"item {n}: unknown keys {sorted(unknown)}")
        name = str(item.get("id", f"item{n:03d}"))
        odir = out_root / name
        odir.mkdir(parents=True, exist_ok=True)
        mesh = load_mesh(rec.input(base / item["mesh"]))
        emb = SquareEmbedding()
        if item.get("keypoints"):
            kf = lasso.read_keypoints(rec.input(base / item["keypoints"]))
            sv = item.get("seed_voxel")
            sv = np.asarray(sv, np.int64) if sv is not None else kf.seed
            if sv is None:
                raise DataError(f"item {name}: keypoint file has no seed voxel")
            with _Timer(rec, f"{name}/extract"):
                mesh = lasso.lasso_part(mesh, kf.keypoints, sv, int(item.get("resolution", kf.resolution)))
            save_mesh(mesh, odir / "part.ply")
            rec.output(odir / "part.ply")
        if item.get("flatten", True):
            with _Timer(rec, f"{name}/flatten"):
                mesh, _ = flatten.flatten_part(mesh)
            save_mesh(mesh, odir / "flat.ply")
            rec.output(odir / "flat.ply")
        if item.get("stitch", True):
            with _Timer(rec, f"{name}/stitch"):
                res = _stitch(mesh, argparse.Namespace(**stitch_opts))
            mesh, emb = res.mesh, _stitch_embedding(res)
            save_mesh(mesh, odir / "tile.ply")
            rec.output(odir / "tile.ply")
        if item.get("embedding"):
            emb = _embedding(rec.input(base / item["embedding"]))
        sub = RunRecord(f"run/{name}", [])
        image, report = _fit_pipeline(mesh, emb, config, sub, resolution, name)
        for stage, t in sub.doc["timings"].items():
            rec.time(f"{name}/{stage}", t)
        vdm.write_vdm(image, odir / "shape.vdmf")
        rec.output(odir / "shape.vdmf")
        _write_report(report, odir / "report.json")
        rec.output(odir / "report.json")
        result = vdm.apply_to_plane(image, resolution)
        save_mesh(result, odir / "applied.ply")
        rec.output(odir / "applied.ply")
        if render_opts["poses"]:
            with _Timer(rec, f"{name}/render"):
                _render_all(result, odir / "renders", argparse.Namespace(**render_opts), rec)
        summary[name] = {"final_chamfer": report.final_chamfer, "final_chamfer_p2p": report.final_chamfer_p2p,
                         "epochs_run": report.epochs_run}
    rec.doc["results"] = summary
    return out_root / "manifest"


# -- parser ---------------------------------------------------------------------------


def _add_fit_flags(p):
    g = p.add_argument_group("fit overrides")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--grid-samples", type=int, help="jittered grid samples per step (a perfect square)")
    g.add_argument("--target-samples", type=int)
    g.add_argument("--boundary-samples", type=int)
    g.add_argument("--eval-every", type=int)
    g.add_argument("--target-chamfer", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vdmforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"vdmforge {__version__}")
    parser.add_argument("--threads", type=int, help="cap BLAS threads (fallback: VDMFORGE_THREADS)")
    parser.add_argument("--config", help="JSON config file (defaults < config < flags)")
    parser.add_argument("--record", help="run-record path (default: <output>.run.json)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sample", help="sample oriented points on a mesh surface")
    p.add_argument("mesh")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("-n", "--count", type=int, default=100_000)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("filter-interior", help="drop points inside a closed mesh (winding number)")
    p.add_argument("points")
    p.add_argument("mesh")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--exact", action="store_true", help="exact summation instead of the tree")
    p.set_defaults(func=cmd_filter_interior)

    p = sub.add_parser("extract-part", help="cut a part out of a mesh with a voxel lasso")
    p.add_argument("mesh")
    p.add_argument("keypoints", help="keypoint JSON file")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--seed-voxel", type=int, nargs=3, help="voxel inside the region (overrides the file)")
    p.add_argument("--resolution", type=int, help="voxel resolution (overrides the file)")
    p.add_argument("--connectivity", type=int, default=26, choices=(6, 18, 26))
    p.set_defaults(func=cmd_extract_part)

    p = sub.add_parser("flatten", help="make the part boundary coplanar with minimal distortion")
    p.add_argument("part")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_flatten)

    p = sub.add_parser("stitch", help="embed a flattened part in a square tile")
    p.add_argument("patch")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--tile-resolution", type=int, default=64)
    p.add_argument("--margin", type=float, default=0.05)
    p.add_argument("--smooth-rings", type=int, default=2)
    p.add_argument("--smooth-iterations", type=int, default=3, help="0 disables seam smoothing")
    p.add_argument("--smooth-lambda", type=float, default=0.5)
    p.add_argument("--embedding-out", help="write the tile placement JSON for fit-vdm")
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("augment", help="translate, scale and rotate a flattened part in its plane")
    p.add_argument("part")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--translate", type=float, nargs=2, default=(0.0, 0.0), metavar=("T", "B"))
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--rotate", type=float, default=0.0, help="degrees about the plane normal")
    p.add_argument("--random", action="store_true", help="draw the parameters from --seed")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-translate", type=float, default=0.1)
    p.add_argument("--max-scale", type=float, default=1.25)
    p.add_argument("--margin", type=float, default=0.0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("fit-vdm", help="fit a deformation field to a target and extract a VDM")
    p.add_argument("target", help="target mesh, or oriented points")
    p.add_argument("-o", "--output", required=True, help=".vdmf path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--embedding", help="square placement JSON (default: unit square on z=0)")
    p.add_argument("--report", help="fit report path (default: <output>.report.json)")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit_vdm)

    p = sub.add_parser("apply-vdm", help="apply a VDM to a plane or to a mesh with UVs")
    p.add_argument("vdm")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--base", help="base mesh with UVs (default: subdivided unit plane)")
    p.add_argument("--subdivision", type=int, default=256)
    p.add_argument("--region", type=float, nargs=4, default=(0.0, 0.0, 1.0, 1.0), metavar=("U0", "V0", "U1", "V1"))
    p.add_argument("--amplitude", type=float, default=1.0)
    p.set_defaults(func=cmd_apply_vdm)

    p = sub.add_parser("render", help="render normal maps or gray shading from a pose set")
    p.add_argument("mesh")
    p.add_argument("--outdir", required=True)
    p.add_argument("--poses", default="generation", choices=("generation", "evaluation"))
    p.add_argument("--width", type=float, default=1.2)
    p.add_argument("--resolution", type=int, default=320)
    p.add_argument("--center", type=float, nargs=3, help="look-at point (default: vertex mean)")
    p.add_argument("--mode", default="normals", choices=("normals", "gray"))
    p.add_argument("--shading", default="flat", choices=("flat", "smooth"))
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fixture", help="write an analytic test surface")
    p.add_argument("name", choices=("bump", "square"))
    p.add_argument("-o", "--output", required=True)
    p.add_argument("-n", type=int, default=256, help="grid quads per side")
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("selftest", help="run the acceptance checks")
    p.add_argument("--only", type=int, nargs="+", help="criterion numbers")
    p.add_argument("--quick", action="store_true", help="skip the long fitting criteria")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("run", help="run the whole pipeline over a manifest")
    p.add_argument("manifest")
    p.add_argument("-o", "--output", help="output directory (default: manifest 'output')")
    p.add_argument("--seed", type=int)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_run)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Find ``--config`` and the subcommand first, install config values as defaults, then parse."""
    pre = _Parser(add_help=False)
    for opt in ("--config", "--threads", "--record"):
        pre.add_argument(opt)
    known, rest = pre.parse_known_args(argv)
    commands = parser._subparsers._group_actions[0].choices
    fit_overrides: dict = {}
    if known.config and rest and rest[0] in commands:
        command = rest[0]
        try:
            doc = json.loads(_existing(known.config).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{known.config}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise DataError("config file must hold a JSON object")
        sub = commands[command]
        dests = {a.dest for a in sub._actions}
        values = {k: v for k, v in doc.items() if k not in commands and k != "fit" and k in dests}
        section = doc.get(command, {})
        if not isinstance(section, dict):
            raise DataError(f"config section {command!r} must be an object")
        bad = set(section) - dests - {"fit"}
        if bad:
            raise UsageError(f"config section {command!r}: unknown options {sorted(bad)}")
        values.update({k: v for k, v in section.items() if k != "fit"})
        fit_overrides = {**doc.get("fit", {}), **section.get("fit", {})}
        for a in sub._actions:
            # a config value satisfies a required option
            if a.dest in values:
                a.required = False
        sub.set_defaults(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})
    args = parser.parse_args(argv)
    args._fit_overrides = fit_overrides
    return args


def _thread_count(args) -> int | None:
    n = args.threads
    if n is None and os.environ.get("VDMFORGE_THREADS"):
        try:
            n = int(os.environ["VDMFORGE_THREADS"])
        except ValueError:
            raise UsageError("VDMFORGE_THREADS must be an integer") from None
    if n is not None and n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _error(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code, **extra}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        threads = _thread_count(args)
        rec = RunRecord(args.command, argv)
        rec.doc["threads"] = threads
        with threadpool_limits(limits=threads):
            primary = args.func(args, rec)
        if primary is not None:
            rec.write(_record_path(args, primary))
        return EXIT_OK
    except UsageError as exc:
        return _error("UsageError", str(exc), EXIT_USAGE)
    except VdmForgeError as exc:
        return _error(type(exc).__name__, str(exc), exc.exit_code)
    except OSError as exc:
        return _error(type(exc).__name__, str(exc), EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
