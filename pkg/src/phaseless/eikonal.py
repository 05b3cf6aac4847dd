"""Travel times for the isotropic metric ``n(x)|dx|``.

Fast marching on a voxel grid solves ``|grad tau| = n`` from a point source,
with the nodes inside a small ball around the source initialised analytically.
Geodesics are recovered by steepest descent on the interpolated travel time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .grid import VoxelField

FAR, TRIAL, KNOWN = 0, 1, 2
SOURCE_BALL_CELLS = 3.0


class EikonalError(RuntimeError):
    pass


class GeodesicTraceError(EikonalError):
    pass


@dataclass(frozen=True)
class TauField:
    source: np.ndarray
    grid: VoxelField
    n_max: float
    source_radius: float

    def __call__(self, x) -> np.ndarray:
        return tau_at(self, x)


# -- heap helpers (binary min-heap keyed on travel time, lazy deletion) --------

@numba.njit(cache=True)
def _heap_push(keys, idx, size, key, val):
    pos = size
    keys[pos] = key
    idx[pos] = val
    while pos > 0:
        parent = (pos - 1) >> 1
        if keys[parent] <= keys[pos]:
            break
        keys[parent], keys[pos] = keys[pos], keys[parent]
        idx[parent], idx[pos] = idx[pos], idx[parent]
        pos = parent
    return size + 1


@numba.njit(cache=True)
def _heap_pop(keys, idx, size):
    key = keys[0]
    val = idx[0]
    size -= 1
    keys[0] = keys[size]
    idx[0] = idx[size]
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= size:
            break
        child = left
        if left + 1 < size and keys[left + 1] < keys[left]:
            child = left + 1
        if keys[pos] <= keys[child]:
            break
        keys[child], keys[pos] = keys[pos], keys[child]
        idx[child], idx[pos] = idx[pos], idx[child]
        pos = child
    return key, val, size


@numba.njit(cache=True)
def _local_solve(tau, state, slow, i, j, k, second_order):
    nx, ny, nz = tau.shape
    b = np.empty(3)
    a = np.empty(3)
    m = 0
    for axis in range(3):
        best = np.inf
        coef = 1.0
        for sgn in (-1, 1):
            ii, jj, kk = i, j, k
            if axis == 0:
                ii += sgn
                if ii < 0 or ii >= nx:
                    continue
            elif axis == 1:
                jj += sgn
                if jj < 0 or jj >= ny:
                    continue
            else:
                kk += sgn
                if kk < 0 or kk >= nz:
                    continue
            if state[ii, jj, kk] != KNOWN:
                continue
            t1 = tau[ii, jj, kk]
            val = t1
            c = 1.0
            if second_order:
                i2, j2, k2 = ii, jj, kk
                ok = True
                if axis == 0:
                    i2 += sgn
                    ok = 0 <= i2 < nx
                elif axis == 1:
                    j2 += sgn
                    ok = 0 <= j2 < ny
                else:
                    k2 += sgn
                    ok = 0 <= k2 < nz
                if ok and state[i2, j2, k2] == KNOWN and tau[i2, j2, k2] <= t1:
                    val = (4.0 * t1 - tau[i2, j2, k2]) / 3.0
                    c = 2.25
            if val < best:
                best = val
                coef = c
        if best < np.inf:
            b[m] = best
            a[m] = coef
            m += 1
    if m == 0:
        return np.inf
    order = np.argsort(b[:m])
    bs = b[:m][order]
    as_ = a[:m][order]
    s2 = slow[i, j, k] ** 2
    result = np.inf
    for used in range(1, m + 1):
        sa = 0.0
        sab = 0.0
        sab2 = 0.0
        for q in range(used):
            sa += as_[q]
            sab += as_[q] * bs[q]
            sab2 += as_[q] * bs[q] * bs[q]
        disc = sab * sab - sa * (sab2 - s2)
        if disc < 0.0:
            break
        t = (sab + np.sqrt(disc)) / sa
        if used < m and t > bs[used]:
            result = t
            continue
        result = t
        break
    return result


@numba.njit(cache=True)
def _march(tau, state, slow, second_order):
    nx, ny, nz = tau.shape
    total = nx * ny * nz
    cap = 7 * total + 16
    keys = np.empty(cap)
    idx = np.empty(cap, dtype=np.int64)
    size = 0
    # seed the trial band from the initialised (known) nodes
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if state[i, j, k] != KNOWN:
                    continue
                for d in range(6):
                    ii, jj, kk = i, j, k
                    if d == 0:
                        ii -= 1
                    elif d == 1:
                        ii += 1
                    elif d == 2:
                        jj -= 1
                    elif d == 3:
                        jj += 1
                    elif d == 4:
                        kk -= 1
                    else:
                        kk += 1
                    if ii < 0 or jj < 0 or kk < 0 or ii >= nx or jj >= ny or kk >= nz:
                        continue
                    if state[ii, jj, kk] == KNOWN:
                        continue
                    t = _local_solve(tau, state, slow, ii, jj, kk, second_order)
                    if t < tau[ii, jj, kk]:
                        tau[ii, jj, kk] = t
                        state[ii, jj, kk] = TRIAL
                        size = _heap_push(keys, idx, size, t, (ii * ny + jj) * nz + kk)
    last = 0.0
    violations = 0
    while size > 0:
        t, flat, size = _heap_pop(keys, idx, size)
        i = flat // (ny * nz)
        j = (flat // nz) % ny
        k = flat % nz
        if state[i, j, k] == KNOWN or t > tau[i, j, k]:
            continue
        state[i, j, k] = KNOWN
        if t < last * (1.0 - 1e-12) - 1e-300:
            violations += 1
        if t > last:
            last = t
        for d in range(6):
            ii, jj, kk = i, j, k
            if d == 0:
                ii -= 1
            elif d == 1:
                ii += 1
            elif d == 2:
                jj -= 1
            elif d == 3:
                jj += 1
            elif d == 4:
                kk -= 1
            else:
                kk += 1
            if ii < 0 or jj < 0 or kk < 0 or ii >= nx or jj >= ny or kk >= nz:
                continue
            if state[ii, jj, kk] == KNOWN:
                continue
            tn = _local_solve(tau, state, slow, ii, jj, kk, second_order)
            # second-order updates can dip below the front; keep acceptance causal
            if tn < t:
                tn = t
            if tn < tau[ii, jj, kk]:
                tau[ii, jj, kk] = tn
                state[ii, jj, kk] = TRIAL
                if size >= cap:
                    return -1
                size = _heap_push(keys, idx, size, tn, (ii * ny + jj) * nz + kk)
    return violations


def solve_tau(n: VoxelField, y, second_order: bool = True) -> TauField:
    """Fast-marching travel times from the point source ``y``.

    Nodes within ``3 * spacing`` of ``y`` get ``n(y) * |x - y|``; the rest of
    the grid is filled in accepted-time order by upwind updates.
    """
    y = np.asarray(y, dtype=float).reshape(3)
    if not n.contains(y):
        raise EikonalError(f"source {y} outside grid box")
    if np.any(n.values < 1.0 - 1e-12):
        raise EikonalError("refractive index below 1")
    h = n.spacing
    n_y = float(n.interpolate(y))
    radius = SOURCE_BALL_CELLS * h
    dist = np.linalg.norm(n.node_coords() - y, axis=-1)
    tau = np.full(n.dims, np.inf)
    state = np.zeros(n.dims, dtype=np.int8)
    ball = dist <= radius
    tau[ball] = n_y * dist[ball]
    state[ball] = KNOWN
    violations = _march(tau, state, n.values * h, bool(second_order))
    if violations < 0:
        raise EikonalError("fast-marching heap overflow")
    if violations > 0:
        raise EikonalError(f"causality violated at {violations} accepted nodes")
    return TauField(y, n.with_values(tau), float(n.values.max()), radius)


def tau_at(t: TauField, x) -> np.ndarray:
    """Trilinearly interpolated travel time at ``x``."""
    x = np.asarray(x, dtype=float)
    if not np.all(t.grid.contains(x, pad=1e-9 * t.grid.spacing)):
        raise EikonalError("query point outside grid box")
    return t.grid.interpolate(x)


def _gradient(t: TauField) -> np.ndarray:
    g = np.stack(np.gradient(t.grid.values, t.grid.spacing), axis=-1)
    return g


def trace_geodesic(t: TauField, x, step: float | None = None, grad: np.ndarray | None = None) -> np.ndarray:
    """Steepest-descent path from ``x`` back to the source.

    Returns points ordered from ``x`` to the source; the final point is the
    source itself.
    """
    return trace_geodesics(t, np.asarray(x, dtype=float)[None, :], step, grad)[0]


def trace_geodesics(t: TauField, xs, step: float | None = None, grad: np.ndarray | None = None) -> list[np.ndarray]:
    """Vectorised :func:`trace_geodesic` over many receivers.

    Raises :class:`GeodesicTraceError` naming how many receivers failed, with
    the per-receiver results attached as ``paths`` (``None`` for failures).
    """
    xs = np.asarray(xs, dtype=float).reshape(-1, 3)
    h = t.grid.spacing
    step = 0.5 * h if step is None else float(step)
    if step > 0.5 * h + 1e-15 or step <= 0:
        raise ValueError("step must be in (0, spacing/2]")
    if grad is None:
        grad = _gradient(t)
    tau0 = tau_at(t, xs)
    if np.any(tau0 <= 0):
        raise ValueError("trace start must have positive travel time")
    max_steps = 10 * (tau0 * t.n_max / step)
    limit = int(np.ceil(max_steps.max())) + 1
    lo, hi = t.grid.origin, t.grid.upper
    pos = xs.copy()
    hist = [pos.copy()]
    end = np.full(len(xs), -1)
    failed = np.zeros(len(xs), dtype=bool)
    active = np.linalg.norm(pos - t.source, axis=1) > t.source_radius
    end[~active] = 0
    for it in range(1, limit + 1):
        if not active.any():
            break
        ia = np.flatnonzero(active)
        p = pos[ia]
        g = np.stack([t.grid.interpolate(p, grad[..., a]) for a in range(3)], axis=-1)
        norm = np.linalg.norm(g, axis=1)
        bad = (norm < 1e-12) | (it > max_steps[ia])
        failed[ia[bad]] = True
        active[ia[bad]] = False
        good = ia[~bad]
        pos[good] = np.clip(p[~bad] - step * g[~bad] / norm[~bad, None], lo, hi)
        hist.append(pos.copy())
        arrived = good[np.linalg.norm(pos[good] - t.source, axis=1) <= t.source_radius]
        end[arrived] = it
        active[arrived] = False
    failed |= active
    hist = np.stack(hist)
    out = []
    for i in range(len(xs)):
        if failed[i]:
            out.append(None)
        else:
            out.append(np.vstack([hist[: end[i] + 1, i], t.source[None, :]]))
    if failed.any():
        err = GeodesicTraceError(f"{int(failed.sum())} geodesic(s) did not reach the source ball")
        err.paths = out
        err.failed = failed
        raise err
    return out


def polyline_length(path: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(path, axis=0), axis=1).sum())


def weighted_length(path: np.ndarray, n: VoxelField, samples_per_segment: int = 4) -> float:
    """Integral of ``n`` along a polyline by the midpoint rule on sub-segments."""
    a = path[:-1]
    b = path[1:]
    s = (np.arange(samples_per_segment) + 0.5) / samples_per_segment
    pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    seg = np.linalg.norm(b - a, axis=1)
    vals = n.interpolate(pts)
    return float((vals.mean(axis=1) * seg).sum())


def dijkstra_tau(n: VoxelField, source_index, reach: int = 1) -> np.ndarray:
    """Shortest paths on the lattice graph linking each node to the nodes ``reach`` steps away.

    Edges follow every primitive offset with components in ``[-reach, reach]``
    (26 neighbours for ``reach=1``, 98 for ``reach=2``). Edge cost is the
    length times Simpson's rule for n over the endpoints and the midpoint.
    Independent oracle for :func:`solve_tau`; it overestimates by the
    metrication error of the stencil, which shrinks as ``reach`` grows.
    """
    from math import gcd

    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import dijkstra

    if reach < 1:
        raise ValueError("reach must be >= 1")
    dims = n.dims
    vals = n.values
    coords = n.node_coords()
    flat = np.arange(np.prod(dims)).reshape(dims)
    rng_ = range(-reach, reach + 1)
    rows, cols, w = [], [], []
    for d in ((i, j, k) for i in rng_ for j in rng_ for k in rng_):
        if d <= (0, 0, 0) or gcd(gcd(abs(d[0]), abs(d[1])), abs(d[2])) != 1:
            continue
        sl_a = tuple(slice(max(0, -e), dims[a] - max(0, e)) for a, e in enumerate(d))
        sl_b = tuple(slice(max(0, e), dims[a] - max(0, -e)) for a, e in enumerate(d))
        if any(s.stop <= s.start for s in sl_a):
            continue
        length = n.spacing * np.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
        if reach == 1:
            mid = 0.5 * (vals[sl_a] + vals[sl_b])
        else:
            mid = n.interpolate(0.5 * (coords[sl_a] + coords[sl_b]).reshape(-1, 3)).reshape(vals[sl_a].shape)
        rows.append(flat[sl_a].ravel())
        cols.append(flat[sl_b].ravel())
        w.append(((vals[sl_a] + 4.0 * mid + vals[sl_b]) / 6.0 * length).ravel())
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    ww = np.concatenate(w)
    size = int(np.prod(dims))
    graph = coo_matrix((ww, (r, c)), shape=(size, size)).tocsr()
    src = int(np.ravel_multi_index(tuple(source_index), dims))
    dist = dijkstra(graph, directed=False, indices=src)
    return dist.reshape(dims)


def travel_times(n: VoxelField, y, xs, reference: bool = True) -> np.ndarray:
    """Travel times from ``y`` to the points ``xs``.

    With ``reference`` the lattice error is cancelled against a homogeneous
    solve on the same grid: ``tau[n] - tau[1] + |x - y|``. The correction is
    exact for ``n = 1`` and removes most of the direction-dependent
    discretisation bias for weak contrasts.
    """
    xs = np.asarray(xs, dtype=float)
    y = np.asarray(y, dtype=float)
    t = tau_at(solve_tau(n, y), xs)
    if not reference:
        return t
    flat = n.with_values(np.ones(n.dims))
    return t - tau_at(solve_tau(flat, y), xs) + np.linalg.norm(xs - y, axis=-1)
