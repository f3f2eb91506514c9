from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vdmforge import fixtures, vdm
from vdmforge.deformfit import (
    Adam, DeformField, FitConfig, SquareEmbedding, boundary_loss, boundary_residual, chamfer_loss, extract_vdm, fit,
    init_to_plane, parameter_count,
)
from vdmforge.deformfit.fit import boundary_samples, pixel_centers, stratified_grid, _rng
from vdmforge.errors import ConvergenceError, DataError, NonFiniteError
from vdmforge.flatten import Plane

SMALL = (2, 64, 64, 64, 64, 64, 3)
TINY = (2, 8, 8, 8, 3)


def reference_forward(params: np.ndarray, widths, skip: int | None, slope: float, p: np.ndarray) -> np.ndarray:
    """Straight-line float64 evaluation, reading weights by hand from the flat vector."""
    params = params.astype(np.float64)
    out = np.empty((len(p), 3))
    for r, x in enumerate(np.asarray(p, np.float64)):
        h = x
        off = 0
        for k in range(len(widths) - 1):
            a, b = widths[k], widths[k + 1]
            W = params[off:off + a * b].reshape(a, b)
            off += a * b
            bias = params[off:off + b]
            off += b
            z = np.array([sum(h[i] * W[i, j] for i in range(a)) + bias[j] for j in range(b)])
            if k == len(widths) - 2:
                h = z
                break
            act = np.where(z > 0, z, slope * z)
            if skip is not None and k == skip - 1:
                act = act + h
            h = act
        out[r] = h
    return out


def brute_chamfer(P, Q):
    d = ((P[:, None] - Q[None]) ** 2).sum(-1)
    return d.min(1).mean() + d.min(0).mean(), d.argmin(1), d.argmin(0)


@pytest.fixture(scope="module")
def small_init():
    emb = SquareEmbedding()
    field, trace = init_to_plane(DeformField(SMALL, seed=0, skip_layer=2), emb, FitConfig(seed=0), return_trace=True)
    return emb, field, trace


# -- field -------------------------------------------------------------------------------------


def test_default_parameter_count():
    f = DeformField(seed=0)
    assert f.n_params == parameter_count((2,) + (512,) * 7 + (3,)) == 2 * 512 + 512 + 6 * (512 * 512 + 512) + 512 * 3 + 3
    assert f.n_layers == 8 and f.skip_layer == 4 and f.negative_slope == 0.01


def test_zero_parameters_give_zero():
    f = DeformField(TINY, skip_layer=2, params=np.zeros(parameter_count(TINY)))
    assert np.array_equal(f.forward(np.random.default_rng(0).random((10, 2))), np.zeros((10, 3)))


@pytest.mark.parametrize("widths,skip", [(TINY, 2), ((2, 5, 7, 7, 4, 3), 3), ((2, 6, 3), None)])
def test_matches_reference_forward(widths, skip):
    rng = np.random.default_rng(1)
    f = DeformField(widths, skip_layer=skip, dtype=np.float64, seed=3)
    p = rng.uniform(-0.2, 1.2, (20, 2))
    ref = reference_forward(f.params, widths, skip, 0.01, p)
    assert np.abs(f.forward(p) - ref).max() <= 1e-6 * np.abs(ref).max()


def test_default_architecture_matches_reference():
    f = DeformField(seed=5)
    p = np.random.default_rng(2).random((2, 2))
    ref = reference_forward(f.params, f.widths, 4, 0.01, p)
    assert np.abs(f.forward(p) - ref).max() <= 1e-6 * np.abs(ref).max()


def test_batch_rows_equal_single_rows():
    f = DeformField(seed=1)
    p = np.random.default_rng(3).random((700, 2))
    batch = f.forward(p)
    for i in (0, 1, 511, 512, 699):
        assert np.array_equal(batch[i], f.forward(p[i:i + 1])[0])


def test_forward_is_continuous():
    f = DeformField(SMALL, skip_layer=2, seed=2, dtype=np.float64)
    p = np.random.default_rng(4).random((50, 2))
    d = np.abs(f.forward(p + 1e-7) - f.forward(p)).max()
    assert d < 1e-4


def test_non_finite_params_rejected():
    f = DeformField(TINY, skip_layer=2)
    f.params[3] = np.nan
    with pytest.raises(NonFiniteError):
        f.forward([[0.5, 0.5]])


@pytest.mark.parametrize("widths,skip", [((3, 8, 3), None), ((2, 8, 3), 1), ((2, 8, 6, 3), 2)])
def test_bad_architectures(widths, skip):
    with pytest.raises(DataError):
        DeformField(widths, skip_layer=skip)


def test_backward_needs_forward_and_shapes():
    f = DeformField(TINY, skip_layer=2)
    with pytest.raises(DataError):
        f.backward(np.zeros((4, 3)))
    f.forward(np.zeros((4, 2)))
    with pytest.raises(DataError):
        f.backward(np.zeros((5, 3)))


def test_zero_output_gradient():
    f = DeformField(TINY, skip_layer=2, dtype=np.float64)
    f.forward(np.random.default_rng(0).random((6, 2)))
    assert not f.backward(np.zeros((6, 3))).any()


@given(st.integers(0, 2**31 - 1))
def test_backward_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    f = DeformField(TINY, skip_layer=2, dtype=np.float64, seed=seed % 1000)
    p = rng.random((5, 2))
    g = rng.normal(size=(5, 3))
    f.forward(p)
    grad = f.backward(g)
    h = 1e-6
    for k in rng.choice(f.n_params, 10, replace=False):
        old = f.params[k]
        f.params[k] = old + h
        up = (f.forward(p, cache=False) * g).sum()
        f.params[k] = old - h
        dn = (f.forward(p, cache=False) * g).sum()
        f.params[k] = old
        fd = (up - dn) / (2 * h)
        assert abs(fd - grad[k]) <= 1e-6 * max(1.0, abs(fd))


def test_backward_linear_over_batch():
    rng = np.random.default_rng(7)
    f = DeformField(TINY, skip_layer=2, dtype=np.float64)
    p = rng.random((4, 2))
    g = rng.normal(size=(4, 3))
    f.forward(p)
    total = f.backward(g)
    parts = np.zeros_like(total)
    for i in range(4):
        f.forward(p[i:i + 1])
        parts += f.backward(g[i:i + 1])
    assert np.abs(total - parts).max() < 1e-12 * max(1.0, np.abs(total).max())


def test_adam_first_step_is_lr_sign():
    a = Adam(lr=0.1)
    x = np.zeros(4)
    a.step(x, np.array([1.0, -2.0, 3.0, 0.0]))
    assert np.allclose(x, [-0.1, 0.1, -0.1, 0.0], atol=1e-8)


# -- losses --------------------------------------------------------------------------------------


def test_chamfer_equal_sets():
    P = np.random.default_rng(0).random((30, 3))
    loss, grad = chamfer_loss(P, P)
    assert loss == 0 and not grad.any()


def test_chamfer_hand_value():
    loss, grad = chamfer_loss([[0, 0, 0]], [[1, 0, 0]])
    assert loss == 2.0
    assert np.array_equal(grad, [[-4.0, 0, 0]])


def test_chamfer_empty():
    with pytest.raises(DataError):
        chamfer_loss(np.zeros((0, 3)), np.zeros((2, 3)))


@given(st.integers(0, 2**31 - 1))
def test_chamfer_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    P, Q = rng.random((50, 3)), rng.random((50, 3))
    loss, _, p2q, q2p = chamfer_loss(P, Q, return_pairs=True)
    ref, a, b = brute_chamfer(P, Q)
    assert np.array_equal(p2q, a) and np.array_equal(q2p, b)
    assert loss == ref or abs(loss - ref) <= 1e-15 * ref


@given(st.integers(0, 2**31 - 1))
def test_chamfer_symmetric_and_translation_invariant(seed):
    rng = np.random.default_rng(seed)
    P, Q = rng.random((20, 3)), rng.random((35, 3))
    t = rng.normal(size=3)
    a = chamfer_loss(P, Q)[0]
    assert abs(a - chamfer_loss(Q, P)[0]) < 1e-12
    assert abs(a - chamfer_loss(P + t, Q + t)[0]) < 1e-9


@given(st.integers(0, 2**31 - 1))
def test_chamfer_gradient_fixed_pairing(seed):
    rng = np.random.default_rng(seed)
    P, Q = rng.random((15, 3)), rng.random((15, 3))
    loss, grad = chamfer_loss(P, Q)
    d = rng.normal(size=P.shape)
    eps = 1e-7
    # the pairing is piecewise constant; tiny steps rarely cross a switch
    fd = (chamfer_loss(P + eps * d, Q)[0] - chamfer_loss(P - eps * d, Q)[0]) / (2 * eps)
    assert abs(fd - (grad * d).sum()) < 1e-5


def test_boundary_loss_cases():
    emb = SquareEmbedding()
    uv = boundary_samples(40, _rng(0, 1))
    assert boundary_residual(emb.proj(uv), uv, emb)[0] == 0
    c = np.array([0.1, -0.2, 0.3])
    assert abs(boundary_residual(emb.proj(uv) + c, uv, emb)[0] - c @ c) < 1e-15
    f = DeformField(TINY, skip_layer=2, dtype=np.float64)
    loss, grad = boundary_loss(f, uv, emb)
    r = f.forward(uv, cache=False) - emb.proj(uv)
    assert abs(loss - (r * r).sum(1).mean()) < 1e-9
    assert grad.shape == f.params.shape


def test_samplers():
    uv = stratified_grid(8, _rng(1, 2))
    cell = np.floor(uv * 8).astype(int)
    assert len({tuple(c) for c in cell.tolist()}) == 64
    b = boundary_samples(500, _rng(1, 3))
    on_edge = np.isclose(b, 0) | np.isclose(b, 1)
    assert on_edge.any(1).all() and (b >= 0).all() and (b <= 1).all()
    assert np.array_equal(pixel_centers(4)[5], [1.5 / 4, 1.5 / 4])


# -- embedding ------------------------------------------------------------------------------------------


def test_embedding_proj_and_canonical():
    pl = Plane.from_point_normal([0, 0, 1], [1, 1, 1])
    emb = SquareEmbedding(pl, 2.5, np.array([1.0, -1.0, 2.0]))
    uv = np.random.default_rng(0).random((10, 2))
    x = emb.proj(uv)
    c = emb.to_canonical(x)
    assert np.abs(c[:, :2] - uv).max() < 1e-12 and np.abs(c[:, 2]).max() < 1e-12
    assert np.abs(emb.from_canonical(c) - x).max() < 1e-12
    assert np.abs(SquareEmbedding.from_dict(emb.to_dict()).proj(uv) - x).max() < 1e-12
    with pytest.raises(DataError):
        SquareEmbedding(side=0.0)


# -- initialisation and fitting ------------------------------------------------------------------------------


def test_init_postcondition(small_init):
    emb, field, _ = small_init
    r = field.forward(pixel_centers(64)) - emb.proj(pixel_centers(64))
    assert (r * r).sum(1).mean() < 1e-5 * emb.side ** 2
    corners = np.array([[0, 0], [1, 0], [0, 1], [1, 1.0]])
    assert np.abs(field.forward(corners) - emb.proj(corners)).max() < 1e-2 * emb.side


def test_init_extract_near_identity(small_init):
    emb, field, _ = small_init
    img = extract_vdm(field, emb, 32)
    assert np.linalg.norm(img.data, axis=-1).max() < 1e-2


def test_init_trace_moving_average_non_increasing(small_init):
    _, _, trace = small_init
    m = np.convolve(np.asarray(trace), np.ones(10) / 10, "valid")
    # monotone until the averaged loss reaches the stochastic floor near the tolerance
    above = m > 10 * FitConfig().init_tolerance
    assert above[0] and not above[-1]
    head = m[: np.argmin(above)]
    assert (np.diff(head) <= 0).all()
    assert m[-1] < 1e-4 * m[0]


def test_init_budget_exhausted():
    with pytest.raises(ConvergenceError):
        init_to_plane(DeformField(TINY, skip_layer=2), SquareEmbedding(), FitConfig(init_max_epochs=25))


def test_extract_offset_field(small_init):
    emb0, field, _ = small_init
    pl = Plane.from_point_normal([0, 0, 0], [0.2, -0.3, 0.9])
    emb = SquareEmbedding(pl, 1.5, np.array([0.3, 0.1, -0.2]))
    c = np.array([0.05, -0.02, 0.01])
    # a field equal to proj + c: rebuild proj exactly with a linear network
    widths = (2, 3)
    W = emb.side * np.stack([pl.tangent, pl.bitangent])
    b = emb.center - 0.5 * emb.side * (pl.tangent + pl.bitangent) + c
    lin = DeformField(widths, skip_layer=None, dtype=np.float64, params=np.concatenate([W.ravel(), b]))
    img = extract_vdm(lin, emb, 16)
    want = (c @ pl.frame.T / emb.side).astype(np.float32)
    assert np.abs(img.data - want).max() <= 1e-7


def test_extract_then_apply_reproduces_forward(small_init):
    emb, field, _ = small_init
    img = extract_vdm(field, emb, 32)
    m = vdm.apply_to_plane(img, 32)
    x = emb.to_canonical(field.forward(pixel_centers(32)).astype(np.float64))
    assert np.abs(m.vertices - x).max() < 1e-6


def test_extract_resolution_range(small_init):
    emb, field, _ = small_init
    for r in (15, 4097):
        with pytest.raises(DataError):
            extract_vdm(field, emb, r)


def small_fit_config(**kw) -> FitConfig:
    base = dict(seed=3, epochs=60, grid_samples_per_step=16 * 16, target_samples_per_step=512,
                boundary_samples_per_step=64, target_pool_size=4000, eval_samples=2500, eval_every=20)
    base.update(kw)
    return FitConfig(**base)


def test_fit_deterministic_and_report(small_init):
    emb, field, _ = small_init
    target = fixtures.bump_mesh(32)
    a, ra = fit(field, target, emb, small_fit_config())
    b, rb = fit(field, target, emb, small_fit_config())
    assert ra.loss_trace == rb.loss_trace and np.array_equal(a.params, b.params)
    assert ra.epochs_run == 60 and len(ra.loss_trace) == 60
    assert [e[0] for e in ra.eval_trace] == [20, 40, 60]
    d = json.loads(ra.to_json())
    assert d["seed"] == 3 and d["config"]["epochs"] == 60 and "blas" in d["threads"]
    c, rc = fit(field, target, emb, small_fit_config(seed=4))
    assert rc.loss_trace != ra.loss_trace


def test_fit_reduces_loss_on_bump(small_init):
    emb, field, _ = small_init
    _, rep = fit(field, fixtures.bump_mesh(32), emb, small_fit_config(epochs=150, learning_rate=1e-3))
    assert np.mean(rep.loss_trace[-10:]) < 0.5 * np.mean(rep.loss_trace[:10])


def test_fit_identity_target_stays_flat(small_init):
    emb, field, _ = small_init
    g, rep = fit(field, fixtures.flat_square(), emb, small_fit_config(epochs=40, target_chamfer=1e-9))
    assert rep.final_chamfer < 1e-4


def test_fit_early_stop(small_init):
    emb, field, _ = small_init
    _, rep = fit(field, fixtures.flat_square(), emb, small_fit_config(target_chamfer=1.0))
    assert rep.stopped_early and rep.epochs_run == 20


def test_fit_config_validation():
    with pytest.raises(DataError):
        FitConfig(epochs=0)
    with pytest.raises(DataError):
        FitConfig(grid_samples_per_step=1000)
    with pytest.raises(DataError):
        FitConfig(learning_rate=0.0)
    assert FitConfig.from_dict(FitConfig(seed=9).to_dict()) == FitConfig(seed=9)


def test_fit_rejects_non_finite(small_init):
    emb, field, _ = small_init
    bad = field.copy()
    bad.params[:] *= 1e30
    with pytest.raises(NonFiniteError) as exc:
        with np.errstate(over="ignore", invalid="ignore"):
            fit(bad, fixtures.flat_square(), emb, small_fit_config(epochs=2))
    assert exc.value.step == 0
