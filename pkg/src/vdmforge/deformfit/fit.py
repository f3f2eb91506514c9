from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field as dc_field, fields

import numpy as np
from scipy.spatial import cKDTree
from threadpoolctl import threadpool_info

from ..errors import ConvergenceError, DataError, NonFiniteError
from ..meshcore import OrientedPointSet, TriMesh, sample_surface
from ..meshcore.primitives import grid_triangles
from ..meshcore.query import TriangleLocator
from .embedding import SquareEmbedding
from .field import Adam, DeformField
from .losses import boundary_residual, chamfer_loss

# Offsets that derive independent Philox streams from the single fit seed.
_STREAM_GRID, _STREAM_BOUNDARY, _STREAM_TARGET, _STREAM_POOL, _STREAM_EVAL, _STREAM_INIT = range(1, 7)


@dataclass
class FitConfig:
    learning_rate: float = 5e-4
    epochs: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grid_samples_per_step: int = 128 * 128
    target_samples_per_step: int = 16384
    boundary_samples_per_step: int = 1024
    boundary_weight: float = 1.0
    seed: int = 0
    # points drawn from a mesh target to form the training pool
    target_pool_size: int = 100_000
    eval_samples: int = 100_000
    # 0 disables intermediate held-out evaluation
    eval_every: int = 0
    # stop as soon as the held-out Chamfer drops below this value (absolute units)
    target_chamfer: float | None = None
    init_samples_per_step: int = 32 * 32
    init_max_epochs: int = 6000
    init_tolerance: float = 1e-5
    init_check_every: int = 25

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        counts = ("epochs", "grid_samples_per_step", "target_samples_per_step", "boundary_samples_per_step",
                  "target_pool_size", "eval_samples", "init_samples_per_step", "init_max_epochs", "init_check_every")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise DataError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise DataError("learning_rate must be positive")
        for name in ("grid_samples_per_step", "init_samples_per_step"):
            n = math.isqrt(int(getattr(self, name)))
            if n * n != int(getattr(self, name)):
                raise DataError(f"{name} must be a perfect square (stratified n x n grid)")
        if self.boundary_weight < 0:
            raise DataError("boundary_weight must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown fit config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitReport:
    config: dict
    seed: int
    threads: dict
    epochs_run: int = 0
    wall_time_s: float = 0.0
    loss_trace: list = dc_field(default_factory=list)
    chamfer_trace: list = dc_field(default_factory=list)
    boundary_trace: list = dc_field(default_factory=list)
    eval_trace: list = dc_field(default_factory=list)
    heldout: bool = True
    final_chamfer: float = float("nan")
    final_chamfer_p2p: float = float("nan")
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, stream]))


def stratified_grid(n: int, rng: np.random.Generator) -> np.ndarray:
    """One jittered sample per cell of an n x n grid over [0, 1]^2, row-major in v."""
    j, i = np.divmod(np.arange(n * n), n)
    return (np.stack([i, j], 1) + rng.random((n * n, 2))) / n


def boundary_samples(m: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the perimeter of the unit square."""
    s = rng.random(m) * 4.0
    edge = np.minimum(s.astype(np.int64), 3)
    t = s - edge
    uv = np.empty((m, 2))
    uv[edge == 0] = np.stack([t, np.zeros(m)], 1)[edge == 0]
    uv[edge == 1] = np.stack([np.ones(m), t], 1)[edge == 1]
    uv[edge == 2] = np.stack([1 - t, np.ones(m)], 1)[edge == 2]
    uv[edge == 3] = np.stack([np.zeros(m), 1 - t], 1)[edge == 3]
    return uv


def pixel_centers(r: int) -> np.ndarray:
    """(r*r, 2) uv of pixel centres, row-major: pixel (i, j) at index j*r + i."""
    c = (np.arange(r) + 0.5) / r
    u, v = np.meshgrid(c, c, indexing="xy")
    return np.stack([u.ravel(), v.ravel()], 1)


def evaluate(field: DeformField, uv: np.ndarray, chunk: int = 16384) -> np.ndarray:
    out = np.empty((len(uv), 3))
    for s in range(0, len(uv), chunk):
        out[s:s + chunk] = field.forward(uv[s:s + chunk], cache=False)
    return out


def _thread_info() -> dict:
    return {
        "blas": [
            {k: i.get(k) for k in ("internal_api", "num_threads", "version")}
            for i in threadpool_info()
        ]
    }


_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])


def init_to_plane(
    field: DeformField,
    embedding: SquareEmbedding,
    config: FitConfig | None = None,
    *,
    return_trace: bool = False,
):
    """Fit a copy of ``field`` to the embedded square, ``phi(p) ~ proj(p)``.

    Runs Adam on jittered ``init_samples_per_step`` grids until the mean squared
    deviation on a 64 x 64 pixel-centre grid is below
    ``init_tolerance * side**2`` and the four square corners are within
    ``0.01 * side`` of their targets. Raises :class:`ConvergenceError` if the
    epoch budget runs out first.
    """
    config = config or FitConfig()
    field = field.copy()
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    rng = _rng(config.seed, _STREAM_INIT)
    n = math.isqrt(config.init_samples_per_step)
    val_uv = np.concatenate([pixel_centers(64), _CORNERS])
    val_target = embedding.proj(val_uv)
    threshold = config.init_tolerance * embedding.side ** 2
    corner_tol = 1e-2 * embedding.side
    trace = []
    val = float("inf")
    for epoch in range(config.init_max_epochs):
        uv = stratified_grid(n, rng)
        out = field.forward(uv)
        loss, g = boundary_residual(out, uv, embedding)
        if not np.isfinite(loss):
            raise NonFiniteError("initialisation loss is not finite", epoch)
        trace.append(loss)
        opt.step(field.params, field.backward(g))
        if (epoch + 1) % config.init_check_every == 0:
            r = evaluate(field, val_uv) - val_target
            val = float((r[:-4] * r[:-4]).sum(1).mean())
            # the corners sit outside the pixel-centre grid, so they are checked separately
            if val < threshold and np.linalg.norm(r[-4:], axis=1).max() < corner_tol:
                break
    else:
        raise ConvergenceError(f"plane initialisation did not reach {threshold:.3g}", val)
    return (field, trace) if return_trace else field


class _HeldOut:
    """Held-out evaluation: surface-to-surface Chamfer between the field and the target.

    The field surface is the triangulated field evaluated on an m x m grid with
    m*m >= eval_samples. Field points are measured against the target mesh
    (exact point-triangle distance) or, for a point-set target, against the
    tangent plane of the nearest target point. Target points are measured
    against the triangulated field surface.
    """

    def __init__(self, target, config: FitConfig):
        self.m = math.isqrt(config.eval_samples - 1) + 1
        self.uv = np.stack(np.meshgrid(np.linspace(0, 1, self.m), np.linspace(0, 1, self.m), indexing="xy"), -1).reshape(-1, 2)
        self.tris = grid_triangles(self.m, self.m)
        if isinstance(target, TriMesh):
            self.points = sample_surface(target, config.eval_samples, seed=_mix(config.seed, _STREAM_EVAL))
            self.locator = TriangleLocator(target)
            self.heldout = True
        else:
            self.points = target
            self.locator = None
            self.heldout = False
        self.tree = cKDTree(self.points.points)

    def __call__(self, field: DeformField) -> tuple[float, float]:
        x = evaluate(field, self.uv)
        # field -> target
        if self.locator is not None:
            d_pq, _ = self.locator.query(x)
        else:
            _, j = self.tree.query(x)
            d_pq = np.einsum("ij,ij->i", x - self.points.points[j], self.points.normals[j]) ** 2
        # target -> field surface
        surf = TriMesh(x, self.tris, check=False)
        d_qp, _ = TriangleLocator(surf, k=8).query(self.points.points)
        surface = float(d_pq.mean() + d_qp.mean())
        p2p = float(chamfer_loss(x, self.points.points)[0])
        return surface, p2p


def _mix(seed: int, stream: int) -> int:
    return int(np.random.Generator(np.random.Philox(key=[seed, stream])).integers(0, 2**63 - 1))


def _target_pool(target, config: FitConfig) -> np.ndarray:
    if isinstance(target, TriMesh):
        return sample_surface(target, config.target_pool_size, seed=_mix(config.seed, _STREAM_POOL)).points
    if isinstance(target, OrientedPointSet):
        return target.points
    raise DataError(f"fit target must be a TriMesh or OrientedPointSet, got {type(target).__name__}")


def fit(field: DeformField, target, embedding: SquareEmbedding, config: FitConfig | None = None):
    """Optimise a copy of a plane-initialised ``field`` towards ``target``.

    Every step draws a jittered ``n x n`` grid P, uniform boundary samples dP and
    a subsample Q of the target pool (all from seeded Philox streams), and takes
    one Adam step on chamfer(phi(P), Q) + boundary_weight * boundary(phi(dP)).

    Returns ``(field, FitReport)``.
    """
    config = config or FitConfig()
    field = field.copy()
    pool = _target_pool(target, config)
    if not len(pool):
        raise DataError("fit target is empty")
    heldout = _HeldOut(target, config)
    report = FitReport(config=config.to_dict(), seed=config.seed, threads=_thread_info(), heldout=heldout.heldout)

    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    rng_grid = _rng(config.seed, _STREAM_GRID)
    rng_bnd = _rng(config.seed, _STREAM_BOUNDARY)
    rng_tgt = _rng(config.seed, _STREAM_TARGET)
    n = math.isqrt(config.grid_samples_per_step)
    nq = min(config.target_samples_per_step, len(pool))
    t0 = time.perf_counter()
    for step in range(config.epochs):
        uv = stratified_grid(n, rng_grid)
        buv = boundary_samples(config.boundary_samples_per_step, rng_bnd)
        q = pool[rng_tgt.choice(len(pool), size=nq, replace=False)] if nq < len(pool) else pool
        out = field.forward(np.concatenate([uv, buv]))
        if not np.isfinite(out).all():
            raise NonFiniteError("field output is not finite", step)
        c_loss, g_p = chamfer_loss(out[: len(uv)], q)
        b_loss, g_b = boundary_residual(out[len(uv):], buv, embedding)
        loss = c_loss + config.boundary_weight * b_loss
        if not np.isfinite(loss):
            raise NonFiniteError("fit loss is not finite", step)
        report.loss_trace.append(loss)
        report.chamfer_trace.append(c_loss)
        report.boundary_trace.append(b_loss)
        grad_out = np.concatenate([g_p, config.boundary_weight * g_b])
        opt.step(field.params, field.backward(grad_out))
        report.epochs_run = step + 1
        if config.eval_every and (step + 1) % config.eval_every == 0 and step + 1 < config.epochs:
            surface, p2p = heldout(field)
            report.eval_trace.append([step + 1, surface, p2p])
            if config.target_chamfer is not None and surface < config.target_chamfer:
                report.stopped_early = True
                break
    report.final_chamfer, report.final_chamfer_p2p = heldout(field)
    if not report.stopped_early:
        report.eval_trace.append([report.epochs_run, report.final_chamfer, report.final_chamfer_p2p])
    report.wall_time_s = time.perf_counter() - t0
    return field, report


def heldout_chamfer(field: DeformField, target, config: FitConfig | None = None) -> tuple[float, float]:
    """(surface Chamfer, point-to-point Chamfer) of ``field`` on the held-out set of ``config``."""
    return _HeldOut(target, config or FitConfig())(field)


def extract_vdm(field: DeformField, embedding: SquareEmbedding, resolution: int, *, source: str = "", seed: int | None = None):
    """Sample the field at pixel centres and store ``(phi - proj) / side`` in the (t, b, n) frame."""
    from ..vdm import VdmImage

    if not 16 <= resolution <= 4096:
        raise DataError("VDM resolution must lie in [16, 4096]")
    uv = pixel_centers(resolution)
    d = (evaluate(field, uv) - embedding.proj(uv)) @ embedding.frame.T / embedding.side
    if not np.isfinite(d).all():
        raise NonFiniteError("field produced non-finite displacements")
    meta = {"source": source, "seed": seed, "amplitude": "tile side = 1", "embedding": embedding.to_dict()}
    return VdmImage(d.reshape(resolution, resolution, 3).astype(np.float32), meta)
