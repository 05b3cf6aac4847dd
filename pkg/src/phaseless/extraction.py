"""Reduce phaseless records to line integrals or travel times."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .forward import FOUR_PI, PhaselessDataset, km_members


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class KmSequence:
    delta: float
    members: np.ndarray


def km_sequence(x, y, z, k0: float, count: int) -> KmSequence:
    """Wavenumbers ``k_m = (pi/2 + 2 pi m) / delta >= k0`` where the cross term's sine is 1.

    ``delta = |x - z| - |x - y|``.
    """
    x, y, z = (np.asarray(v, dtype=float) for v in (x, y, z))
    delta = float(np.linalg.norm(x - z) - np.linalg.norm(x - y))
    if delta <= 0:
        raise ExtractionError(f"delta={delta:.3g} <= 0: auxiliary source too close (Theorem 1 needs ell > R*sqrt(8))")
    return KmSequence(delta, km_members(delta, k0, count))


def limit_sequence(f, ks, x, y, z) -> np.ndarray:
    """``G(k) = 4 pi |x-y| (f - A0(x,y)^2 - A0(x,z)^2) k / A0(x,z)``; tends to the line integral."""
    r_y = float(np.linalg.norm(np.asarray(x) - np.asarray(y)))
    r_z = float(np.linalg.norm(np.asarray(x) - np.asarray(z)))
    a_y = 1.0 / (FOUR_PI * r_y)
    a_z = 1.0 / (FOUR_PI * r_z)
    return FOUR_PI * r_y * (np.asarray(f, dtype=float) - a_y * a_y - a_z * a_z) * np.asarray(ks, dtype=float) / a_z


def extract_line_integral(f, ks, x, y, z, count_m: int = 8, start: int | None = None) -> float:
    """Limit of :func:`limit_sequence` by a least-squares fit ``G = g + c/k``.

    Uses ``count_m`` consecutive samples beginning at ``start`` (default: the
    last ``count_m`` samples, i.e. the largest wavenumbers).
    """
    if count_m < 2:
        raise ExtractionError("count_m must be >= 2")
    f = np.asarray(f, dtype=float)
    ks = np.asarray(ks, dtype=float)
    if start is None:
        start = len(ks) - count_m
    if start < 0 or start + count_m > len(ks):
        raise ExtractionError(f"need {count_m} k_m samples from index {start}, record has {len(ks)}")
    sel = slice(start, start + count_m)
    kk = ks[sel]
    delta = float(np.linalg.norm(np.asarray(x) - np.asarray(z)) - np.linalg.norm(np.asarray(x) - np.asarray(y)))
    if delta <= 0:
        raise ExtractionError("delta <= 0 (Theorem 1 condition ell > R*sqrt(8) violated)")
    if np.max(np.abs(np.sin(kk * delta) - 1.0)) > 1e-8:
        raise ExtractionError("record is not sampled at the k_m members")
    G = limit_sequence(f[sel], kk, x, y, z)
    design = np.stack([np.ones_like(kk), 1.0 / kk], axis=1)
    coef, *_ = np.linalg.lstsq(design, G, rcond=None)
    return float(coef[0])


def _parabolic_peak(mag: np.ndarray, i: int) -> float:
    """Vertex offset of the parabola through log-magnitudes at ``i-1, i, i+1``."""
    a, b, c = np.log(mag[i - 1:i + 2] + 1e-300)
    den = a - 2.0 * b + c
    if den == 0:
        return float(i)
    return i + 0.5 * (a - c) / den


def extract_rho(f, ks, rho_max: float | None = None, bound: float | None = None,
                pad: int = 16, min_ratio: float = 10.0) -> float:
    """Angular frequency (in k) of the oscillating part of ``f``.

    Mean removal, Hann window, zero-padded real FFT, then a parabolic fit to
    the log-magnitude around the strongest bin.
    """
    f = np.asarray(f, dtype=float)
    ks = np.asarray(ks, dtype=float)
    n = len(ks)
    if n < 8 or f.shape != ks.shape:
        raise ExtractionError("need at least 8 uniformly spaced samples")
    dk = (ks[-1] - ks[0]) / (n - 1)
    if not np.allclose(np.diff(ks), dk, rtol=1e-9, atol=0):
        raise ExtractionError("sweep must be uniform")
    if rho_max is not None and not dk < math.pi / rho_max:
        raise ExtractionError(f"sweep step {dk:.4g} violates the Nyquist rule dk < pi/rho_max = {math.pi / rho_max:.4g}")
    sig = (f - f.mean()) * np.hanning(n)
    nfft = 1 << int(math.ceil(math.log2(n * pad)))
    mag = np.abs(np.fft.rfft(sig, nfft))
    lo = 2 * pad  # skip the Hann main lobe around DC
    if len(mag) < lo + 3:
        raise ExtractionError("sweep too short")
    i = lo + int(np.argmax(mag[lo:-1]))
    med = float(np.median(mag))
    if not (med == 0 and mag[i] > 0) and mag[i] < min_ratio * med:
        raise ExtractionError(f"no dominant spectral peak (ratio {mag[i] / med:.2f} < {min_ratio})")
    if i < 1 or i >= len(mag) - 1:
        raise ExtractionError("spectral peak at band edge")
    freq = _parabolic_peak(mag, i) / (nfft * dk)
    rho = 2.0 * math.pi * freq
    if bound is not None and rho < bound:
        raise ExtractionError(f"rho={rho:.4g} below the positivity bound {bound:.4g}")
    return rho


def tau_from_rho(x, z, rho: float) -> float:
    """``tau(x, y) = |x - z| - rho``, using straight-line times to exterior sources."""
    r_z = float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(z, dtype=float)))
    if rho >= r_z:
        raise ExtractionError("rho >= |x - z| would give a non-positive travel time")
    return r_z - rho


def rho_lower_bound(g: geo.BallGeometry, ell: float, n1: float) -> float:
    return math.hypot(ell, g.R) - g.R - 2.0 * g.R * n1


@dataclass
class RaySampleSet:
    kind: str  # "line_integral" | "travel_time"
    x: np.ndarray
    y: np.ndarray
    value: np.ndarray
    j: np.ndarray
    spread: np.ndarray
    n_failed: int = 0
    warnings: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.value)

    def subset(self, mask) -> "RaySampleSet":
        return RaySampleSet(self.kind, self.x[mask], self.y[mask], self.value[mask], self.j[mask],
                            self.spread[mask], self.n_failed, list(self.warnings))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for i in range(len(self)):
                fh.write(json.dumps({
                    "x": self.x[i].tolist(),
                    "y": self.y[i].tolist(),
                    "j": int(self.j[i]),
                    "kind": self.kind,
                    "value": float(self.value[i]),
                    "spread": float(self.spread[i]),
                }) + "\n")

    @classmethod
    def load(cls, path) -> "RaySampleSet":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not rows:
            raise ExtractionError(f"{path}: no samples")
        kinds = {r["kind"] for r in rows}
        if len(kinds) != 1:
            raise ExtractionError(f"{path}: mixed sample kinds {sorted(kinds)}")
        return cls(
            kind=kinds.pop(),
            x=np.array([r["x"] for r in rows], dtype=float),
            y=np.array([r["y"] for r in rows], dtype=float),
            value=np.array([r["value"] for r in rows], dtype=float),
            j=np.array([r["j"] for r in rows], dtype=np.int64),
            spread=np.array([r.get("spread", 0.0) for r in rows], dtype=float),
        )


def extract_records(ds: PhaselessDataset, count_m: int = 8) -> tuple[np.ndarray, np.ndarray, list]:
    """Per-record values (line integral or travel time) with a failure mask and messages."""
    values = np.full(ds.n_records, np.nan)
    failed = np.zeros(ds.n_records, dtype=bool)
    errors = []
    ys = ds.y_for()
    zs = ds.z_for()
    if ds.model == "helmholtz":
        bound = rho_lower_bound(ds.geometry, ds.ell, ds.n1)
        ks = ds.sweep.ks()
    for r in range(ds.n_records):
        x, y, z = ds.x[r], ys[r], zs[r]
        try:
            if ds.model == "schrodinger":
                values[r] = extract_line_integral(ds.f[r], ds.ks_for(r), x, y, z, count_m)
            else:
                rho = extract_rho(ds.f[r], ks, rho_max=float(np.linalg.norm(x - z)), bound=bound)
                values[r] = tau_from_rho(x, z, rho)
        except ExtractionError as exc:
            failed[r] = True
            errors.append(f"record {r}: {exc}")
    return values, failed, errors


def assemble_ray_samples(ds: PhaselessDataset, count_m: int = 8, max_failed: float = 0.05,
                         neg_tol: float = 1e-6) -> RaySampleSet:
    """Extract every record, merge receivers lit by several auxiliary sources.

    Helmholtz receivers outside the shadow of their source get the straight
    travel time ``|x - y|``.
    """
    values, failed, errors = extract_records(ds, count_m)
    n_failed = int(failed.sum())
    if ds.n_records and n_failed > max_failed * ds.n_records:
        raise ExtractionError(f"{n_failed}/{ds.n_records} records failed extraction; first: {errors[:3]}")
    kind = "line_integral" if ds.model == "schrodinger" else "travel_time"
    notes = []
    if n_failed:
        notes.append(f"{n_failed} record(s) failed extraction and were dropped")
    keys = ds.y_index * (int(ds.receiver_id.max()) + 1 if ds.n_records else 1) + ds.receiver_id
    ok = ~failed
    order = np.lexsort((ds.j[ok], keys[ok]))
    idx = np.flatnonzero(ok)[order]
    uniq, first = np.unique(keys[idx], return_index=True)
    bounds = list(first) + [len(idx)]
    xs, ys_out, vals, js, spreads = [], [], [], [], []
    ys = ds.y_for()
    for a, b in zip(bounds[:-1], bounds[1:]):
        grp = idx[a:b]
        r0 = grp[0]
        x, y = ds.x[r0], ys[r0]
        v = values[grp]
        if kind == "travel_time" and not geo.is_shadowed(x, y, ds.geometry):
            val, spread, jv = float(np.linalg.norm(x - y)), 0.0, 0
        else:
            val, spread, jv = float(v.mean()), float(v.max() - v.min()), int(ds.j[r0])
        xs.append(x)
        ys_out.append(y)
        vals.append(val)
        js.append(jv)
        spreads.append(spread)
    vals = np.array(vals)
    if kind == "line_integral":
        n_neg = int(np.sum(vals < -neg_tol))
        if n_neg:
            msg = f"{n_neg} line integral(s) below -{neg_tol:g} for a non-negative potential"
            warnings.warn(msg)
            notes.append(msg)
    return RaySampleSet(
        kind=kind,
        x=np.array(xs).reshape(-1, 3),
        y=np.array(ys_out).reshape(-1, 3),
        value=vals,
        j=np.array(js, dtype=np.int64),
        spread=np.array(spreads),
        n_failed=n_failed,
        warnings=notes,
    )
