"""Leading-order phaseless interference data.

Schrodinger model: ``u = v(x, y) + v(x, z)`` with ``v = v0 + v_sc`` where
``v_sc`` keeps only the line-integral term of its high-frequency expansion.
Helmholtz model: ``u = A(x, y) exp(ik tau(x, y)) + A0(x, z) exp(ik |x - z|)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .eikonal import TauField, tau_at, travel_times
from .grid import VoxelField
from .phantom import BumpSum, Segment, line_integral_oracle, rasterize

FOUR_PI = 4.0 * math.pi
DATASET_MAGIC = b"PHLD0001"
MODELS = ("schrodinger", "helmholtz")


class ForwardError(ValueError):
    pass


@dataclass(frozen=True)
class KSweep:
    """Wavenumber band ``[k0, k_max]`` sampled with ``count`` points.

    ``rule="uniform"`` is an evenly spaced grid. ``rule="km"`` samples each
    record at the first ``count`` wavenumbers of its own sequence
    ``(pi/2 + 2 pi m) / delta`` inside the band.
    """

    k0: float
    k_max: float
    count: int
    rule: str = "uniform"

    def __post_init__(self):
        if not self.k0 > 0:
            raise ForwardError("k0 must be positive")
        if not self.k_max > self.k0:
            raise ForwardError("k_max must exceed k0")
        if self.count < 2:
            raise ForwardError("sweep needs at least two samples")
        if self.rule not in ("uniform", "km"):
            raise ForwardError(f"unknown sweep rule {self.rule!r}")

    @property
    def step(self) -> float:
        return (self.k_max - self.k0) / (self.count - 1)

    def ks(self) -> np.ndarray:
        return np.linspace(self.k0, self.k_max, self.count)

    def to_dict(self) -> dict:
        return {"k0": self.k0, "k_max": self.k_max, "count": self.count, "rule": self.rule}


def km_members(delta, k0: float, count: int) -> np.ndarray:
    """First ``count`` values ``(pi/2 + 2 pi m)/delta >= k0`` with integer ``m >= 0``.

    Vectorised over ``delta``; returns shape ``delta.shape + (count,)``.
    """
    delta = np.asarray(delta, dtype=float)
    if np.any(delta <= 0):
        raise ForwardError("phase difference |x - z| - |x - y| must be positive (needs ell > R*sqrt(8))")
    m0 = np.maximum(np.ceil((k0 * delta - 0.5 * math.pi) / (2.0 * math.pi) - 1e-12), 0.0)
    # guard the ceil against round-off landing one member below k0
    m0 = np.where((0.5 * math.pi + 2.0 * math.pi * m0) / delta < k0, m0 + 1, m0)
    m = m0[..., None] + np.arange(count)
    return (0.5 * math.pi + 2.0 * math.pi * m) / delta[..., None]


def A0(x, y) -> np.ndarray:
    """Free-space amplitude ``1 / (4 pi |x - y|)``."""
    r = np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float), axis=-1)
    if np.any(r == 0):
        raise ForwardError("field evaluated at its source")
    return 1.0 / (FOUR_PI * r)


def v0(x, y, k) -> complex:
    r = np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))
    if r == 0:
        raise ForwardError("field evaluated at its source")
    return np.exp(1j * np.asarray(k) * r) / (FOUR_PI * r)


def vsc_leading(q: BumpSum, x, y, k, tol: float = 1e-10) -> complex:
    """``i exp(ik|x-y|) / (8 pi |x-y| k) * integral of q over the chord``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = np.linalg.norm(x - y)
    if r == 0:
        raise ForwardError("field evaluated at its source")
    k = np.asarray(k, dtype=float)
    if np.any(k <= 0):
        raise ForwardError("wavenumber must be positive")
    integral = line_integral_oracle(q, Segment(x, y), tol)
    return 1j * np.exp(1j * k * r) / (8.0 * math.pi * r * k) * integral


def field_schrodinger(q: BumpSum, x, y, z, k, tol: float = 1e-10):
    return (v0(x, y, k) + vsc_leading(q, x, y, k, tol)) + (v0(x, z, k) + vsc_leading(q, x, z, k, tol))


def amplitude_helmholtz(t: TauField, x) -> np.ndarray:
    """Model amplitude ``1 / (4 pi tau(x, y))``; equals ``A0`` in a homogeneous medium."""
    tau = tau_at(t, x)
    if np.any(tau <= 0):
        raise ForwardError("amplitude undefined at zero travel time")
    return 1.0 / (FOUR_PI * tau)


def schrodinger_intensity(r_y, r_z, integral, k) -> np.ndarray:
    """``|u|^2`` for the Schrodinger model, vectorised over records (rows) and k."""
    r_y = np.asarray(r_y, dtype=float)[..., None]
    r_z = np.asarray(r_z, dtype=float)[..., None]
    integral = np.asarray(integral, dtype=float)[..., None]
    u = (
        np.exp(1j * k * r_y) / (FOUR_PI * r_y)
        + 1j * np.exp(1j * k * r_y) * integral / (8.0 * math.pi * r_y * k)
        + np.exp(1j * k * r_z) / (FOUR_PI * r_z)
    )
    return np.abs(u) ** 2


def helmholtz_intensity(amp_y, tau_y, amp_z, r_z, k) -> np.ndarray:
    amp_y = np.asarray(amp_y, dtype=float)[..., None]
    tau_y = np.asarray(tau_y, dtype=float)[..., None]
    amp_z = np.asarray(amp_z, dtype=float)[..., None]
    r_z = np.asarray(r_z, dtype=float)[..., None]
    u = amp_y * np.exp(1j * k * tau_y) + amp_z * np.exp(1j * k * r_z)
    return np.abs(u) ** 2


@dataclass
class PhaselessDataset:
    """Squared-modulus records ``f_j(x, y, k)``.

    Arrays are record-major; row ``r`` belongs to source ``y_index[r]``,
    auxiliary source ``j[r]`` (1-based) and receiver ``x[r]`` whose lattice
    label ``receiver_id[r]`` is shared across the three caps of one source.
    """

    geometry: geo.BallGeometry
    model: str
    sweep: KSweep
    ell: float
    n1: float
    sources: np.ndarray
    triads: np.ndarray  # (n_sources, 3, 3)
    y_index: np.ndarray
    j: np.ndarray
    receiver_id: np.ndarray
    x: np.ndarray
    f: np.ndarray
    k: np.ndarray  # (n_records, count) for rule "km", (count,) otherwise
    notes: list = field(default_factory=list)

    @property
    def n_records(self) -> int:
        return int(self.f.shape[0])

    def ks_for(self, r: int) -> np.ndarray:
        return self.k[r] if self.k.ndim == 2 else self.k

    def z_for(self, r=None) -> np.ndarray:
        if r is None:
            return self.triads[self.y_index, self.j - 1]
        return self.triads[self.y_index[r], self.j[r] - 1]

    def y_for(self, r=None) -> np.ndarray:
        return self.sources[self.y_index if r is None else self.y_index[r]]

    def header(self) -> dict:
        return {
            "geometry": {"R0": self.geometry.R0, "R": self.geometry.R},
            "model": self.model,
            "sweep": self.sweep.to_dict(),
            "ell": self.ell,
            "n1": self.n1,
            "sources": self.sources.tolist(),
            "triads": self.triads.tolist(),
            "records": {
                "y_index": self.y_index.tolist(),
                "j": self.j.tolist(),
                "receiver_id": self.receiver_id.tolist(),
                "x": self.x.tolist(),
            },
            "k_block": self.k.ndim == 2,
            "shape": list(self.f.shape),
            "notes": list(self.notes),
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode()
        parts = [DATASET_MAGIC, struct.pack("<Q", len(head)), head,
                 np.ascontiguousarray(self.f, dtype="<f8").tobytes()]
        if self.k.ndim == 2:
            parts.append(np.ascontiguousarray(self.k, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PhaselessDataset":
        if data[:8] != DATASET_MAGIC:
            raise ForwardError("not a phaseless dataset file")
        (hlen,) = struct.unpack_from("<Q", data, 8)
        head = json.loads(data[16:16 + hlen])
        shape = tuple(head["shape"])
        count = shape[0] * shape[1]
        off = 16 + hlen
        f = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(float)
        sweep = KSweep(**head["sweep"])
        if head["k_block"]:
            k = np.frombuffer(data, dtype="<f8", count=count, offset=off + 8 * count).reshape(shape).astype(float)
        else:
            k = sweep.ks()
        rec = head["records"]
        return cls(
            geometry=geo.BallGeometry(**head["geometry"]),
            model=head["model"],
            sweep=sweep,
            ell=head["ell"],
            n1=head["n1"],
            sources=np.array(head["sources"], dtype=float).reshape(-1, 3),
            triads=np.array(head["triads"], dtype=float).reshape(-1, 3, 3),
            y_index=np.array(rec["y_index"], dtype=np.int64),
            j=np.array(rec["j"], dtype=np.int64),
            receiver_id=np.array(rec["receiver_id"], dtype=np.int64),
            x=np.array(rec["x"], dtype=float).reshape(-1, 3),
            f=f,
            k=k,
            notes=list(head.get("notes", [])),
        )

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PhaselessDataset":
        return cls.from_bytes(Path(path).read_bytes())


def cap_fraction(R: float, ell: float) -> float:
    """Area fraction of ``S`` lit by an auxiliary source at distance ``sqrt(R^2 + ell^2)``."""
    return 0.5 * (1.0 - R / math.hypot(R, ell))


def receiver_lattice(triad: geo.SourceTriad, R: float, density: int) -> np.ndarray:
    """Fibonacci lattice on ``S`` in the triad's frame, sized for ``density`` points per lit cap."""
    n = max(int(round(density / cap_fraction(R, triad.ell))), 3)
    return geo.fibonacci_sphere(n, R) @ triad.rotation.T


def source_points(R: float, count: int) -> np.ndarray:
    """Source positions: Fibonacci lattice over ``S``."""
    return geo.fibonacci_sphere(count, R)


def forward_grid(g: geo.BallGeometry, n: BumpSum, spacing: float) -> VoxelField:
    """Refractive index rasterised on ``[-1.25 R, 1.25 R]^3`` (baseline 1 outside the support)."""
    grid = VoxelField.covering(1.25 * g.R, spacing)
    return grid.with_values(rasterize(n, grid, subtract_baseline=False))


def chord_meets_support(phantom: BumpSum, y, xs) -> np.ndarray:
    """True where the segment ``y -> x`` enters some bump's support ball.

    Elsewhere ``n = 1`` along the chord and, since ``n >= 1``, the straight
    segment is a shortest path: ``tau = |x - y|`` exactly.
    """
    y = np.asarray(y, dtype=float)
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    d = xs - y
    dd = np.einsum("ij,ij->i", d, d)
    out = np.zeros(len(xs), dtype=bool)
    for b in phantom.bumps:
        if b.amplitude == 0:
            continue
        s = np.clip(((b.center - y) @ d.T) / dd, 0.0, 1.0)
        closest = y + s[:, None] * d
        out |= np.linalg.norm(closest - b.center, axis=1) < b.radius
    return out


def check_ell(g: geo.BallGeometry, model: str, ell: float, n1: float) -> None:
    es = geo.ell_star(g)
    if model == "schrodinger":
        lim = geo.min_ell_schrodinger(g)
        if not ell > lim:
            raise ForwardError(f"ell={ell:.6g} violates Theorem 1 condition ell > R*sqrt(8) = {lim:.6g}")
    elif model == "helmholtz":
        lim = geo.min_ell_helmholtz(g, n1)
        if not ell > lim:
            raise ForwardError(f"ell={ell:.6g} violates Theorem 2 condition ell > R*sqrt((1+2 n1)^2-1) = {lim:.6g}")
    else:
        raise ForwardError(f"unknown model {model!r}")
    if ell < es:
        raise ForwardError(f"ell={ell:.6g} below ell*={es:.6g}: lit caps need not cover the shadow (Lemma 1)")


def synth_dataset(
    g: geo.BallGeometry,
    phantom: BumpSum,
    model: str,
    y_list,
    ell: float,
    sweep: KSweep,
    receiver_density: int = 200,
    *,
    n1: float | None = None,
    grid_spacing: float | None = None,
    amplitude: str = "model",
    remainder_c: float = 0.0,
    noise: float = 0.0,
    seed: int = 0,
    tau_reference: bool = True,
    tol: float = 1e-10,
) -> PhaselessDataset:
    """Tabulate ``f_j(x, y, k) = |u(x, y, z_j(y), k)|^2`` for every source and lit receiver.

    ``remainder_c`` adds ``c / k^2`` to every sample and ``noise`` applies
    multiplicative Gaussian noise with that relative standard deviation.
    Helmholtz travel times come from fast marching on a grid of spacing
    ``grid_spacing`` (default ``R/24``), reference-corrected unless
    ``tau_reference`` is false, for receivers whose chord crosses a bump;
    the rest get the exact straight time.
    """
    if model not in MODELS:
        raise ForwardError(f"unknown model {model!r}")
    if n1 is None:
        n1 = phantom.max_value() if model == "helmholtz" else 1.0
    phantom.validate(g, n1 if model == "helmholtz" else None)
    if model == "helmholtz" and phantom.baseline != 1.0:
        raise ForwardError("helmholtz model needs a refractive-index phantom (baseline 1)")
    if model == "schrodinger" and phantom.baseline != 0.0:
        raise ForwardError("schrodinger model needs a potential phantom (baseline 0)")
    check_ell(g, model, ell, n1)
    if model == "schrodinger" and sweep.rule != "km":
        raise ForwardError("schrodinger data are sampled on the k_m rule")
    if model == "helmholtz" and sweep.rule != "uniform":
        raise ForwardError("helmholtz data need a uniform sweep")
    if amplitude not in ("model", "unit"):
        raise ForwardError(f"unknown amplitude model {amplitude!r}")

    y_list = np.atleast_2d(np.asarray(y_list, dtype=float))
    triads = [geo.make_triad(g, y, ell) for y in y_list]
    n_grid = None
    if model == "helmholtz":
        h = grid_spacing if grid_spacing is not None else g.R / 24.0
        n_grid = forward_grid(g, phantom, h)
        slack = 2.0 * n1 * h
        rho_bound = math.hypot(ell, g.R) - g.R - 2.0 * g.R * n1

    rows_y, rows_j, rows_id, rows_x, rows_f, rows_k = [], [], [], [], [], []
    for yi, tri in enumerate(triads):
        lattice = receiver_lattice(tri, g.R, receiver_density)
        tau_all = None
        if n_grid is not None:
            tau_all = np.linalg.norm(lattice - tri.y, axis=1)
            crossing = chord_meets_support(phantom, tri.y, lattice)
            if crossing.any():
                tau_all[crossing] = travel_times(n_grid, tri.y, lattice[crossing], reference=tau_reference)
        for jj in range(3):
            z = tri.z[jj]
            lit = np.flatnonzero(geo.is_illuminated(lattice, z))
            xs = lattice[lit]
            r_y = np.linalg.norm(xs - tri.y, axis=1)
            r_z = np.linalg.norm(xs - z, axis=1)
            # chords x->z stay outside the sphere S, hence outside the support
            w = xs - z
            s = np.clip(-(w @ z) / np.einsum("ij,ij->i", w, w), 0.0, 1.0)
            closest = z + s[:, None] * w
            if np.any(np.linalg.norm(closest, axis=1) <= g.R0):
                raise ForwardError("auxiliary-source chord enters the inner ball")
            if model == "schrodinger":
                delta = r_z - r_y
                if np.any(delta <= 0):
                    raise ForwardError("|x - z| - |x - y| <= 0 for a lit receiver (Theorem 1 condition)")
                ks = km_members(delta, sweep.k0, sweep.count)
                if np.any(ks > sweep.k_max):
                    raise ForwardError("k_m members run past k_max; widen the sweep band")
                integral = np.array([line_integral_oracle(phantom, Segment(x, tri.y), tol) for x in xs])
                f = schrodinger_intensity(r_y, r_z, integral, ks)
                rows_k.append(ks)
            else:
                tau_y = tau_all[lit]
                rho = r_z - tau_y
                if np.any(rho < rho_bound - slack):
                    raise ForwardError("travel-time difference below its Theorem 2 lower bound")
                amp_y = 1.0 / (FOUR_PI * tau_y) if amplitude == "model" else np.ones_like(tau_y)
                f = helmholtz_intensity(amp_y, tau_y, 1.0 / (FOUR_PI * r_z), r_z, sweep.ks())
            if remainder_c:
                kk = ks if model == "schrodinger" else sweep.ks()[None, :]
                f = f + remainder_c / kk**2
            rows_y.append(np.full(len(lit), yi))
            rows_j.append(np.full(len(lit), jj + 1))
            rows_id.append(lit)
            rows_x.append(xs)
            rows_f.append(f)
    f = np.concatenate(rows_f, axis=0)
    if noise:
        rng = np.random.default_rng(seed)
        f = f * (1.0 + noise * rng.standard_normal(f.shape))
    f = np.maximum(f, 0.0)
    k = np.concatenate(rows_k, axis=0) if model == "schrodinger" else sweep.ks()
    return PhaselessDataset(
        geometry=g,
        model=model,
        sweep=sweep,
        ell=float(ell),
        n1=float(n1),
        sources=y_list,
        triads=np.stack([t.z for t in triads]),
        y_index=np.concatenate(rows_y).astype(np.int64),
        j=np.concatenate(rows_j).astype(np.int64),
        receiver_id=np.concatenate(rows_id).astype(np.int64),
        x=np.concatenate(rows_x, axis=0),
        f=f,
        k=k,
    )
