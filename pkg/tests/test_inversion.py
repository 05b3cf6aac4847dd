from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from phaseless.extraction import RaySampleSet
from phaseless.grid import VoxelField
from phaseless.inversion import (
    InversionError,
    Reconstruction,
    SparseRaySystem,
    assemble_kinematic_linearized,
    assemble_tomography,
    bent_ray_refine,
    build_matrix,
    clipped_length,
    evaluate,
    grid_for_ball,
    inversion_grid,
    ray_coverage,
    siddon_row,
    sirt_solve,
)
from phaseless.phantom import BumpSum, rasterize, single_bump


def _samples(kind, x, y, value):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = len(x)
    return RaySampleSet(kind, x, y, np.asarray(value, dtype=float), np.ones(n, dtype=np.int64), np.zeros(n))


def test_axis_aligned_ray_unit_voxels():
    g = inversion_grid((4, 3, 3), 1.0)
    idx, ln = siddon_row(g, [[-5.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
    np.testing.assert_allclose(ln, 1.0)
    assert len(idx) == 4
    assert ln.sum() == pytest.approx(4.0)


def test_single_voxel_diagonal():
    h = 0.37
    g = VoxelField(np.zeros(3), h, np.zeros((2, 2, 2)))
    idx, ln = siddon_row(g, [[-h / 2] * 3, [h / 2] * 3])
    assert idx.tolist() == [0]
    assert ln[0] == pytest.approx(h * math.sqrt(3), rel=1e-14)


points = st.tuples(*[st.floats(-3, 3)] * 3)


@given(points, points)
def test_row_sum_equals_clipped_length(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if np.linalg.norm(a - b) < 1e-6:
        return
    g = grid_for_ball(1.0, 7, 1.05)
    _, ln = siddon_row(g, np.stack([a, b]))
    assert np.all(ln >= 0)
    assert abs(ln.sum() - clipped_length(g, a, b)) <= 1e-9


def test_polyline_row_sum():
    g = grid_for_ball(1.0, 9, 1.0)
    pts = np.array([[-0.9, -0.2, 0.1], [0.0, 0.4, 0.0], [0.5, -0.3, 0.2], [0.8, 0.8, -0.5]])
    _, ln = siddon_row(g, pts)
    assert ln.sum() == pytest.approx(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum(), abs=1e-9)


def test_siddon_rejects_degenerate():
    g = grid_for_ball(1.0, 4)
    with pytest.raises(InversionError):
        siddon_row(g, [[0.1, 0.2, 0.3]] * 2)
    with pytest.raises(InversionError):
        siddon_row(g, [[0.1, 0.2, 0.3]])


def test_build_matrix_matches_c_order():
    g = inversion_grid((3, 5, 7), 1.0)
    field = np.random.default_rng(0).uniform(size=g.dims)
    a, b = np.array([-10.0, 0.0, 0.0]), np.array([10.0, 0.0, 0.0])
    A = build_matrix(g, [np.stack([a, b])])
    # the ray y = z = 0 runs through the centres of the voxel row [:, 2, 3]
    assert (A @ field.ravel())[0] == pytest.approx(field[:, 2, 3].sum())


def _eye_system(rhs):
    # two rays, each through its own voxel of a 2x2x2 grid; the untouched voxels stay 0
    g = inversion_grid((2, 2, 2), 1.0)
    A = sp.csr_matrix((np.ones(2), ([0, 1], [0, 1])), shape=(2, 8))
    return SparseRaySystem(A, np.asarray(rhs, dtype=float), g)


def test_sirt_identity_like_system():
    rec = sirt_solve(_eye_system([3.0, 4.0]), 5)
    np.testing.assert_allclose(rec.field.values.ravel(), [3.0, 4.0, 0, 0, 0, 0, 0, 0])


def test_sirt_consistent_overdetermined_monotone():
    rng = np.random.default_rng(1)
    g = inversion_grid((4, 4, 4), 1.0)
    A = sp.csr_matrix(rng.uniform(0, 1, (200, 64)) * (rng.uniform(size=(200, 64)) < 0.2))
    x = rng.uniform(0, 1, 64)
    rec = sirt_solve(SparseRaySystem(A, A @ x, g), 3000)
    h = np.array(rec.residual_history)
    assert np.all(np.diff(h) <= 1e-12)
    assert h[-1] < 1e-6


def test_sirt_support_and_sign():
    rng = np.random.default_rng(2)
    g = grid_for_ball(1.0, 6, 1.0)
    rays = [np.stack([rng.normal(size=3) * 2, rng.normal(size=3) * 2]) for _ in range(80)]
    A = build_matrix(g, rays)
    rhs = A @ rng.normal(size=A.shape[1])
    mask = g.ball_mask(0.8)
    rec = sirt_solve(SparseRaySystem(A, rhs, g), 50, 1.0, mask)
    assert np.all(rec.field.values[~mask] == 0.0)
    assert np.all(rec.field.values >= 0.0)
    free = sirt_solve(SparseRaySystem(A, rhs, g), 50, 1.0, mask, nonnegative=False)
    assert free.field.values.min() < 0


def test_sirt_errors():
    g = inversion_grid((2, 2, 2), 1.0)
    empty = SparseRaySystem(sp.csr_matrix((0, 8)), np.zeros(0), g)
    with pytest.raises(InversionError):
        sirt_solve(empty, 5)
    ok = _eye_system([1.0, 1.0])
    with pytest.raises(InversionError):
        sirt_solve(ok, 0)
    with pytest.raises(InversionError):
        sirt_solve(ok, 5, relaxation=2.5)


@settings(max_examples=5)
@given(st.integers(0, 1000))
def test_sirt_matches_weighted_pinv(seed):
    rng = np.random.default_rng(seed)
    g = grid_for_ball(1.0, 5, 1.0)
    a = rng.normal(size=(60, 3))
    b = rng.normal(size=(60, 3))
    a = 1.5 * a / np.linalg.norm(a, axis=1)[:, None]
    b = 1.5 * b / np.linalg.norm(b, axis=1)[:, None]
    A = build_matrix(g, [np.stack([p, q]) for p, q in zip(a, b)])
    rhs = A @ rng.uniform(size=A.shape[1])
    Ad = A.toarray()
    rs, cs = Ad.sum(axis=1), Ad.sum(axis=0)
    rh = np.where(rs > 0, 1 / np.sqrt(np.where(rs > 0, rs, 1)), 0)
    ch = np.where(cs > 0, 1 / np.sqrt(np.where(cs > 0, cs, 1)), 0)
    M = rh[:, None] * Ad * ch[None, :]
    s = np.linalg.svd(M, compute_uv=False)
    smin = s[s > 1e-10 * s[0]].min()
    x_ls = ch * (np.linalg.pinv(M, rcond=1e-10) @ (rh * rhs))
    iters = int(min(40.0 / smin**2, 400_000))
    x = sirt_solve(SparseRaySystem(A, rhs, g), iters, 1.0, nonnegative=False).field.values.ravel()
    assert np.linalg.norm(x - x_ls) <= 1e-4 * np.linalg.norm(x_ls)


def test_tomography_zero_samples_give_zero_field():
    g = grid_for_ball(1.0, 8)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(50, 3))
    y = rng.normal(size=(50, 3))
    sys_ = assemble_tomography(_samples("line_integral", 2 * x / np.linalg.norm(x, axis=1)[:, None],
                                        2 * y / np.linalg.norm(y, axis=1)[:, None], np.zeros(50)), g)
    assert sys_.n_rows == 50
    assert np.all(sys_.rhs == 0)
    rec = sirt_solve(sys_, 20)
    assert np.all(rec.field.values == 0)
    with pytest.raises(InversionError):
        assemble_kinematic_linearized(_samples("line_integral", x, y, np.zeros(50)), g)


def test_consistent_grid_field_converges():
    g = grid_for_ball(1.0, 6, 1.0)
    rng = np.random.default_rng(5)
    truth = rng.uniform(size=g.dims)
    rays = []
    for _ in range(400):
        u = rng.normal(size=(2, 3))
        rays.append(1.5 * u / np.linalg.norm(u, axis=1)[:, None])
    A = build_matrix(g, rays)
    rec = sirt_solve(SparseRaySystem(A, A @ truth.ravel(), g), 20_000)
    assert rec.residual_history[-1] < 1e-6


def test_kinematic_rhs_and_clamp():
    g = grid_for_ball(1.0, 6)
    x = np.array([[2.0, 0.1, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]])
    y = -x
    chord = np.linalg.norm(x - y, axis=1)
    s = _samples("travel_time", x, y, chord + np.array([0.01, -5e-7, -0.02]))
    sys_ = assemble_kinematic_linearized(s, g)
    np.testing.assert_allclose(sys_.rhs, [0.01, 0.0, 0.0], atol=1e-15)
    assert sys_.n_clamped == 1
    homog = assemble_kinematic_linearized(_samples("travel_time", x, y, chord), g)
    assert np.all(homog.rhs == 0)
    assert np.all(sirt_solve(homog, 10).field.values == 0)


def test_ray_coverage():
    g = inversion_grid((3, 3, 3), 1.0)
    rays = [np.array([[-5.0, 0, 0], [5.0, 0, 0]])] * 5 + [np.array([[-5.0, 0, 0], [0.0, 0, 0]])]
    sys_ = SparseRaySystem(build_matrix(g, rays), np.zeros(6), g)
    row = np.zeros(g.dims, dtype=bool)
    row[:, 1, 1] = True
    assert ray_coverage(sys_, row) == 1.0
    assert ray_coverage(sys_, row, min_rays=6) == pytest.approx(2 / 3)
    assert ray_coverage(sys_, np.ones(g.dims, dtype=bool)) == pytest.approx(3 / 27)
    assert ray_coverage(sys_, np.zeros(g.dims, dtype=bool)) == 0.0


def test_evaluate_examples():
    p = single_bump([0.1, 0, 0], 0.5, 1.0)
    g = grid_for_ball(1.0, 10)
    truth = rasterize(p, g)
    assert evaluate(g.with_values(truth), p)["relative_l2"] == 0.0
    assert evaluate(g.with_values(np.zeros(g.dims)), BumpSum())["relative_l2"] == 0.0
    delta = 0.3
    pert = truth.copy()
    pert[5, 5, 5] += delta
    m = evaluate(g.with_values(pert), p)
    assert m["relative_l2"] == pytest.approx(delta / np.linalg.norm(truth), rel=1e-12)
    assert m["max_error"] == pytest.approx(delta)
    with pytest.raises(InversionError):
        evaluate(g.with_values(truth), p, grid=grid_for_ball(1.0, 11))


def test_bent_ray_leaves_homogeneous_zero_field():
    g = grid_for_ball(1.0, 8, 1.0)
    rng = np.random.default_rng(6)
    ys = 2.0 * np.array([[0, 0, -1.0], [0, 1.0, 0]])
    x = rng.normal(size=(40, 3))
    x = 2.0 * x / np.linalg.norm(x, axis=1)[:, None]
    y = np.repeat(ys, 20, axis=0)
    s = _samples("travel_time", x, y, np.linalg.norm(x - y, axis=1))
    lin = sirt_solve(assemble_kinematic_linearized(s, g), 20, 1.0, g.ball_mask(1.0))
    assert np.all(lin.field.values == 0)
    ref = bent_ray_refine(s, g, 2, lin, 2.0, sirt_iterations=20, eikonal_spacing=2.0 / 12)
    assert np.max(np.abs(ref.field.values)) <= 1e-9
    same = bent_ray_refine(s, g, 0, lin, 2.0)
    assert same.field is lin.field and same.residual_history == []
    with pytest.raises(InversionError):
        bent_ray_refine(s, g, -1, lin, 2.0)
    with pytest.raises(InversionError):
        bent_ray_refine(_samples("line_integral", x, y, np.zeros(40)), g, 1, lin, 2.0)


def test_reconstruction_fields():
    rec = sirt_solve(_eye_system([1.0, 1.0]), 3)
    assert isinstance(rec, Reconstruction)
    assert rec.iterations == 3 and len(rec.residual_history) == 4
