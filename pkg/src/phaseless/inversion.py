"""Voxel tomography for the reduced problems.

Line integrals of ``q`` and linearised travel-time anomalies ``tau - |x - y|``
both become ``A m = b`` with ``A`` the ray/voxel intersection lengths; the
system is solved by SIRT with support and sign projections.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp

from .eikonal import GeodesicTraceError, solve_tau, tau_at, trace_geodesics
from .extraction import RaySampleSet
from .grid import VoxelField
from .phantom import BumpSum, rasterize

log = logging.getLogger(__name__)


class InversionError(ValueError):
    pass


@dataclass
class SparseRaySystem:
    A: sp.csr_matrix
    rhs: np.ndarray
    grid: VoxelField
    n_clamped: int = 0
    n_fallback: int = 0
    offset: np.ndarray | None = None
    predicted: np.ndarray | None = None

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]


@dataclass
class Reconstruction:
    field: VoxelField
    iterations: int
    residual_history: list
    mask: np.ndarray
    notes: list = field(default_factory=list)


def inversion_grid(dims, spacing: float) -> VoxelField:
    """Centred voxel grid; voxel ``(i, j, k)`` is the cube of side ``spacing`` around its node."""
    return VoxelField.centered(dims, spacing)


def grid_for_ball(radius: float, n: int, margin: float = 1.05) -> VoxelField:
    """``n^3`` voxels whose cubes tile ``[-margin*radius, margin*radius]^3``."""
    return inversion_grid((n, n, n), 2.0 * margin * radius / n)


@numba.njit(cache=True)
def _traverse(a, b, lo, h, dims, out_idx, out_len, start):
    """Voxel intersection lengths of segment ``a -> b``; returns the new write offset."""
    nx, ny, nz = dims[0], dims[1], dims[2]
    d = b - a
    length = np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    t0 = 0.0
    t1 = 1.0
    hi = np.empty(3)
    for ax in range(3):
        hi[ax] = lo[ax] + h * dims[ax]
        if d[ax] == 0.0:
            if a[ax] < lo[ax] or a[ax] > hi[ax]:
                return start
        else:
            ta = (lo[ax] - a[ax]) / d[ax]
            tb = (hi[ax] - a[ax]) / d[ax]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    if t1 <= t0:
        return start
    cell = np.empty(3, dtype=np.int64)
    step = np.empty(3, dtype=np.int64)
    tnext = np.empty(3)
    tdelta = np.empty(3)
    for ax in range(3):
        # locate the entry cell from the entry point nudged inwards
        p = a[ax] + t0 * d[ax]
        c = int(np.floor((p - lo[ax]) / h))
        if d[ax] > 0 and p - lo[ax] - c * h >= h * (1 - 1e-12):
            c += 1
        if d[ax] < 0 and p - lo[ax] - c * h <= h * 1e-12:
            c -= 1
        c = min(max(c, 0), dims[ax] - 1)
        cell[ax] = c
        if d[ax] > 0:
            step[ax] = 1
            tnext[ax] = (lo[ax] + (c + 1) * h - a[ax]) / d[ax]
            tdelta[ax] = h / d[ax]
        elif d[ax] < 0:
            step[ax] = -1
            tnext[ax] = (lo[ax] + c * h - a[ax]) / d[ax]
            tdelta[ax] = -h / d[ax]
        else:
            step[ax] = 0
            tnext[ax] = np.inf
            tdelta[ax] = np.inf
    t = t0
    w = start
    while t < t1:
        ax = 0
        if tnext[1] < tnext[ax]:
            ax = 1
        if tnext[2] < tnext[ax]:
            ax = 2
        tn = min(tnext[ax], t1)
        if tn > t:
            out_idx[w] = cell[0] + nx * (cell[1] + ny * cell[2])
            out_len[w] = (tn - t) * length
            w += 1
        t = tn
        if t >= t1:
            break
        cell[ax] += step[ax]
        if cell[ax] < 0 or cell[ax] >= dims[ax]:
            break
        tnext[ax] += tdelta[ax]
    return w


@numba.njit(cache=True)
def _traverse_polyline(pts, lo, h, dims, out_idx, out_len, start):
    w = start
    for s in range(pts.shape[0] - 1):
        w = _traverse(pts[s], pts[s + 1], lo, h, dims, out_idx, out_len, w)
    return w


def _cell_lo(grid: VoxelField) -> np.ndarray:
    return grid.origin - 0.5 * grid.spacing


def siddon_row(grid: VoxelField, path) -> tuple[np.ndarray, np.ndarray]:
    """Voxel indices (x-fastest flat) and intersection lengths along a segment or polyline."""
    pts = np.ascontiguousarray(np.asarray(path, dtype=float).reshape(-1, 3))
    if pts.shape[0] < 2:
        raise InversionError("path needs at least two points")
    if np.linalg.norm(np.diff(pts, axis=0), axis=1).sum() == 0:
        raise InversionError("zero-length path")
    dims = np.array(grid.dims, dtype=np.int64)
    cap = (pts.shape[0] - 1) * int(dims.sum() + 3)
    idx = np.empty(cap, dtype=np.int64)
    ln = np.empty(cap)
    w = _traverse_polyline(pts, _cell_lo(grid), grid.spacing, dims, idx, ln, 0)
    idx, ln = idx[:w], ln[:w]
    if len(idx) and len(np.unique(idx)) != len(idx):
        u, inv = np.unique(idx, return_inverse=True)
        ln = np.bincount(inv, weights=ln)
        idx = u
    return idx, ln


def clipped_length(grid: VoxelField, a, b) -> float:
    """Length of segment ``a -> b`` inside the voxel box, by slab clipping."""
    a = np.asarray(a, dtype=float)
    d = np.asarray(b, dtype=float) - a
    lo = _cell_lo(grid)
    hi = lo + grid.spacing * np.array(grid.dims)
    t0, t1 = 0.0, 1.0
    for ax in range(3):
        if d[ax] == 0:
            if not lo[ax] <= a[ax] <= hi[ax]:
                return 0.0
            continue
        ta, tb = sorted(((lo[ax] - a[ax]) / d[ax], (hi[ax] - a[ax]) / d[ax]))
        t0, t1 = max(t0, ta), min(t1, tb)
    return max(t1 - t0, 0.0) * float(np.linalg.norm(d))


def build_matrix(grid: VoxelField, paths) -> sp.csr_matrix:
    """Stack :func:`siddon_row` rows for straight segments ``(a, b)`` or polylines."""
    indptr = [0]
    cols, vals = [], []
    for p in paths:
        i, l = siddon_row(grid, p)
        # x-fastest flat index -> C-order index of values[i, j, k]
        nx, ny, nz = grid.dims
        ii = i % nx
        jj = (i // nx) % ny
        kk = i // (nx * ny)
        cols.append((ii * ny + jj) * nz + kk)
        vals.append(l)
        indptr.append(indptr[-1] + len(i))
    n = int(np.prod(grid.dims))
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    return sp.csr_matrix((vals, cols, np.array(indptr)), shape=(len(indptr) - 1, n))


def assemble_tomography(samples: RaySampleSet, grid: VoxelField) -> SparseRaySystem:
    if samples.kind != "line_integral":
        raise InversionError("tomography needs line-integral samples")
    A = build_matrix(grid, (np.stack([a, b]) for a, b in zip(samples.x, samples.y)))
    return SparseRaySystem(A, samples.value.astype(float).copy(), grid)


def assemble_kinematic_linearized(samples: RaySampleSet, grid: VoxelField, noise_tol: float = 1e-6) -> SparseRaySystem:
    """Straight rays with ``rhs = tau - |x - y|`` clamped at zero.

    Anomalies in ``[-noise_tol, 0)`` are extraction noise and are zeroed
    silently; ``n_clamped`` counts the ones below ``-noise_tol``.
    """
    if samples.kind != "travel_time":
        raise InversionError("kinematic inversion needs travel-time samples")
    A = build_matrix(grid, (np.stack([a, b]) for a, b in zip(samples.x, samples.y)))
    rhs = samples.value - np.linalg.norm(samples.x - samples.y, axis=1)
    n_clamped = int(np.sum(rhs < -noise_tol))
    if n_clamped:
        log.warning("clamped %d negative travel-time anomalies to zero", n_clamped)
    return SparseRaySystem(A, np.maximum(rhs, 0.0), grid, n_clamped=n_clamped)


def ray_coverage(system: SparseRaySystem, mask: np.ndarray, min_rays: int = 5) -> float:
    """Fraction of masked voxels crossed by at least ``min_rays`` rays."""
    hits = np.diff(system.A.tocsc().indptr)
    m = mask.ravel()
    if not m.any():
        return 0.0
    return float(np.mean(hits[m] >= min_rays))


def _weighted_residual(A, x, b, rw) -> float:
    r = b - A @ x
    den = float(np.sqrt(np.sum(rw * b * b)))
    num = float(np.sqrt(np.sum(rw * r * r)))
    if den == 0:
        return num
    return num / den


def sirt_solve(system: SparseRaySystem, iterations: int, relaxation: float = 1.0,
               support_mask: np.ndarray | None = None, nonnegative: bool = True,
               x0: np.ndarray | None = None) -> Reconstruction:
    """Simultaneous iterative reconstruction.

    ``x <- P(x + relaxation * C A^T R (b - A x))`` with ``R``, ``C`` the inverse
    row and column sums and ``P`` the support / sign projection. The recorded
    residual is ``|b - A x|_R / |b|_R``, which this iteration never increases
    for ``0 < relaxation < 2``.
    """
    if iterations < 1:
        raise InversionError("iterations must be >= 1")
    if not 0 < relaxation <= 2:
        raise InversionError("relaxation must lie in (0, 2]")
    A = system.A
    if A.shape[0] == 0 or A.nnz == 0:
        raise InversionError("empty ray system")
    b = np.asarray(system.rhs, dtype=float)
    rs = np.asarray(A.sum(axis=1)).ravel()
    cs = np.asarray(A.sum(axis=0)).ravel()
    rw = np.where(rs > 0, 1.0 / np.where(rs > 0, rs, 1.0), 0.0)
    cw = np.where(cs > 0, 1.0 / np.where(cs > 0, cs, 1.0), 0.0)
    mask = np.ones(A.shape[1], dtype=bool) if support_mask is None else np.asarray(support_mask).ravel()
    AT = A.T.tocsr()
    x = np.zeros(A.shape[1]) if x0 is None else np.asarray(x0, dtype=float).ravel().copy()
    x[~mask] = 0.0
    if nonnegative:
        np.maximum(x, 0.0, out=x)
    history = [_weighted_residual(A, x, b, rw)]
    for _ in range(iterations):
        r = b - A @ x
        x += relaxation * cw * (AT @ (rw * r))
        x[~mask] = 0.0
        if nonnegative:
            np.maximum(x, 0.0, out=x)
        history.append(_weighted_residual(A, x, b, rw))
    grid = system.grid
    return Reconstruction(grid.with_values(x.reshape(grid.dims)), iterations, history,
                          mask.reshape(grid.dims))


def _eikonal_model(recon: VoxelField, R: float, spacing: float) -> VoxelField:
    """``1 + recon`` resampled onto a grid covering ``[-1.25 R, 1.25 R]^3`` (zero perturbation outside)."""
    big = VoxelField.covering(1.25 * R, spacing)
    pts = big.node_coords()
    inside = recon.contains(pts)
    vals = np.ones(big.dims)
    vals[inside] += np.maximum(recon.interpolate(pts[inside]), 0.0)
    return big.with_values(vals)


def _source_groups(samples: RaySampleSet) -> dict:
    groups: dict = {}
    for i, y in enumerate(samples.y):
        groups.setdefault(tuple(np.round(y, 12)), []).append(i)
    return groups


def lattice_bias(samples: RaySampleSet, R: float, eikonal_spacing: float) -> np.ndarray:
    """Homogeneous-medium fast-marching error ``tau_1(x, y) - |x - y|`` per sample."""
    flat = VoxelField.covering(1.25 * R, eikonal_spacing, 1.0)
    out = np.empty(len(samples))
    for idx in _source_groups(samples).values():
        t = solve_tau(flat, samples.y[idx[0]])
        out[idx] = tau_at(t, samples.x[idx]) - np.linalg.norm(samples.x[idx] - samples.y[idx], axis=1)
    return out


def bent_ray_system(samples: RaySampleSet, grid: VoxelField, recon: VoxelField, R: float,
                    eikonal_spacing: float, bias: np.ndarray | None = None) -> SparseRaySystem:
    """Linearisation about the current model along its geodesics.

    Rows integrate along traced geodesics and
    ``rhs = tau - tau_model + A m_model``, where ``tau_model`` is the model
    travel time with the lattice ``bias`` removed. Samples whose geodesic
    cannot be traced fall back to the straight chord.
    """
    model = _eikonal_model(recon, R, eikonal_spacing)
    if bias is None:
        bias = lattice_bias(samples, R, eikonal_spacing)
    paths: list = [None] * len(samples)
    predicted = np.empty(len(samples))
    fallback = 0
    groups = _source_groups(samples)
    for key in sorted(groups):
        idx = groups[key]
        t = solve_tau(model, samples.y[idx[0]])
        predicted[idx] = tau_at(t, samples.x[idx]) - bias[idx]
        try:
            traced = trace_geodesics(t, samples.x[idx])
        except GeodesicTraceError as exc:
            traced = exc.paths
        for i, p in zip(idx, traced):
            if p is None:
                fallback += 1
                p = np.stack([samples.x[i], samples.y[i]])
            paths[i] = p
    A = build_matrix(grid, paths)
    # model travel time minus the perturbation part: the baseline term moved to the rhs
    offset = predicted - A @ recon.values.ravel()
    rhs = samples.value - offset
    return SparseRaySystem(A, np.maximum(rhs, 0.0), grid, n_clamped=int(np.sum(rhs < -1e-6)),
                           n_fallback=fallback, offset=offset, predicted=predicted)


def bent_ray_refine(samples: RaySampleSet, grid: VoxelField, outer_iterations: int,
                    initial: Reconstruction, R: float, *, sirt_iterations: int = 100,
                    relaxation: float = 1.0, eikonal_spacing: float | None = None,
                    nonnegative: bool = True, stagnation: float = 0.01) -> Reconstruction:
    """Fixed-point refinement: trace geodesics in the current model, re-solve, repeat.

    The recorded misfit is ``|tau - tau_model| / |tau - |x - y||`` with
    ``tau_model`` the eikonal travel time of the current model. A step that
    raises it is discarded, so the misfit history never increases. Iteration
    stops when the improvement falls below ``stagnation`` (relative).
    """
    if samples.kind != "travel_time":
        raise InversionError("bent-ray refinement needs travel-time samples")
    if outer_iterations < 0:
        raise InversionError("outer_iterations must be >= 0")
    h = eikonal_spacing if eikonal_spacing is not None else R / 24.0
    chord = np.linalg.norm(samples.x - samples.y, axis=1)
    scale = float(np.linalg.norm(samples.value - chord)) or 1.0
    notes = list(initial.notes)
    if outer_iterations == 0:
        return Reconstruction(initial.field, 0, [], initial.mask, notes)
    bias = lattice_bias(samples, R, h)
    current = initial
    system = bent_ray_system(samples, grid, current.field, R, h, bias)
    history = [float(np.linalg.norm(samples.value - system.predicted)) / scale]
    fallbacks = system.n_fallback
    for it in range(outer_iterations):
        cand = sirt_solve(system, sirt_iterations, relaxation, current.mask, nonnegative,
                          x0=current.field.values)
        cand_system = bent_ray_system(samples, grid, cand.field, R, h, bias)
        misfit = float(np.linalg.norm(samples.value - cand_system.predicted)) / scale
        if misfit > history[-1]:
            notes.append(f"bent-ray iteration {it + 1} raised the misfit; kept previous model")
            break
        fallbacks += cand_system.n_fallback
        improvement = (history[-1] - misfit) / history[-1] if history[-1] > 0 else 0.0
        history.append(misfit)
        current, system = cand, cand_system
        if improvement < stagnation:
            break
    if fallbacks:
        notes.append(f"{fallbacks} geodesic trace(s) fell back to straight rays")
    return Reconstruction(current.field, len(history) - 1, history, current.mask, notes)


def evaluate(recon: Reconstruction | VoxelField, phantom: BumpSum, grid: VoxelField | None = None,
             mask: np.ndarray | None = None) -> dict:
    """Relative L2 and max error of the perturbation inside the support mask."""
    field_ = recon.field if isinstance(recon, Reconstruction) else recon
    if mask is None:
        mask = recon.mask if isinstance(recon, Reconstruction) else None
    grid = field_ if grid is None else grid
    if not grid.same_lattice(field_):
        raise InversionError("reconstruction and evaluation grids differ")
    truth = rasterize(phantom, grid, subtract_baseline=True)
    if mask is None:
        mask = np.ones(grid.dims, dtype=bool)
    diff = (field_.values - truth)[mask]
    ref = float(np.linalg.norm(truth[mask]))
    err = float(np.linalg.norm(diff))
    out = {
        "relative_l2": 0.0 if err == 0 else (err / ref if ref > 0 else float("inf")),
        "max_error": float(np.abs(diff).max()) if diff.size else 0.0,
        "truth_norm": ref,
    }
    if isinstance(recon, Reconstruction) and recon.residual_history:
        out["residual"] = float(recon.residual_history[-1])
    return out
