"""Observation geometry: balls, auxiliary source triads, lit and shadowed caps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ON_SPHERE_RTOL = 1e-9
SOUTH = np.array([0.0, 0.0, -1.0])


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class BallGeometry:
    R0: float
    R: float

    def __post_init__(self):
        if not (0 < self.R0 < self.R):
            raise GeometryError(f"need 0 < R0 < R, got R0={self.R0}, R={self.R}")

    def on_sphere(self, x) -> bool:
        return bool(abs(np.linalg.norm(x) - self.R) <= ON_SPHERE_RTOL * self.R)


@dataclass(frozen=True)
class SourceTriad:
    y: np.ndarray
    ell: float
    z: np.ndarray  # (3, 3), row j-1 holds z^(j)
    rotation: np.ndarray  # maps the canonical frame (y at the south pole) to this one


@dataclass(frozen=True)
class MeridianIntersection:
    phi: float
    xi: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True)
class CoverageReport:
    n_samples: int
    n_shadowed: int
    n_uncovered: int
    worst_point: np.ndarray | None
    ell: float

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_shadowed": self.n_shadowed,
            "n_uncovered": self.n_uncovered,
            "worst_point": None if self.worst_point is None else [float(v) for v in self.worst_point],
            "ell": self.ell,
        }


def ell_star(g: BallGeometry) -> float:
    """Smallest triad circumradius for which the three lit caps cover the shadow."""
    den = g.R**2 - g.R0**2
    if den <= 0:
        raise GeometryError("R0 must be smaller than R")
    return 2.0 * g.R0 * g.R / math.sqrt(den)


def min_ell_schrodinger(g: BallGeometry) -> float:
    return g.R * math.sqrt(8.0)


def min_ell_helmholtz(g: BallGeometry, n1: float) -> float:
    if n1 < 1:
        raise GeometryError(f"n1 must be >= 1, got {n1}")
    return g.R * math.sqrt((1.0 + 2.0 * n1) ** 2 - 1.0)


def ell_threshold(g: BallGeometry, model: str, n1: float = 1.0) -> float:
    """``max(ell_star, model minimum)``: the strict lower bound an admissible ell must exceed."""
    if model == "schrodinger":
        m = min_ell_schrodinger(g)
    elif model == "helmholtz":
        m = min_ell_helmholtz(g, n1)
    else:
        raise GeometryError(f"unknown model {model!r}")
    return max(ell_star(g), m)


def rotation_to(y_hat) -> np.ndarray:
    """Minimal-angle rotation taking the south pole (0, 0, -1) to ``y_hat``."""
    v = np.asarray(y_hat, dtype=float)
    v = v / np.linalg.norm(v)
    c = float(SOUTH @ v)
    if c >= 1.0 - 1e-15:
        return np.eye(3)
    if c <= -1.0 + 1e-15:
        return np.diag([1.0, -1.0, -1.0])  # pi about the x-axis
    axis = np.cross(SOUTH, v)
    s = np.linalg.norm(axis)
    axis /= s
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def canonical_triad(R: float, ell: float) -> np.ndarray:
    """Triad for y = (0, 0, -R): azimuths pi/6, 5pi/6, 3pi/2 on the plane x3 = R."""
    ang = np.array([math.pi / 6, 5 * math.pi / 6, 3 * math.pi / 2])
    return np.stack([ell * np.cos(ang), ell * np.sin(ang), np.full(3, R)], axis=1)


def make_triad(g: BallGeometry, y, ell: float) -> SourceTriad:
    y = np.asarray(y, dtype=float).reshape(3)
    if not g.on_sphere(y):
        raise GeometryError(f"source {y} is not on the sphere |x| = {g.R}")
    if ell <= 0:
        raise GeometryError("ell must be positive")
    Q = rotation_to(y)
    z = canonical_triad(g.R, ell) @ Q.T
    return SourceTriad(y=y, ell=float(ell), z=z, rotation=Q)


def is_illuminated(x, z) -> np.ndarray | bool:
    """``x . (z - x) > 0``; boundary points are dark."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    val = np.einsum("...i,...i->...", x, z - x) > 0
    return bool(val) if val.ndim == 0 else val


def shadow_margin(x, y, g: BallGeometry) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = x - y
    return -np.einsum("...i,...i->...", y, d) - np.linalg.norm(d, axis=-1) * math.sqrt(g.R**2 - g.R0**2)


def is_shadowed(x, y, g: BallGeometry) -> np.ndarray | bool:
    """True when the chord from ``y`` to ``x`` passes through the inner ball."""
    val = shadow_margin(x, y, g) > 0
    return bool(val) if np.ndim(val) == 0 else val


def second_intersection(g: BallGeometry, ell: float, phi: float) -> MeridianIntersection:
    """Second point where the circle ``C(z)`` meets the plane ``x1 = 0``.

    ``z = (ell cos phi, ell sin phi, R)`` and the first intersection is the
    north pole. The closed form follows from the ``+`` root of the quadratic
    in ``beta_2``.
    """
    if not (0 < phi < math.pi):
        raise GeometryError("phi must lie in (0, pi)")
    R = g.R
    s = math.sin(phi)
    den = R * R + ell * ell * s * s
    xi = np.array([0.0, 2.0 * ell * R * R * s / den, R - 2.0 * R * ell * ell * s * s / den])
    z = np.array([ell * math.cos(phi), ell * s, R])
    return MeridianIntersection(phi=phi, xi=xi, beta=(xi - z) / ell)


def shadow_depth(g: BallGeometry) -> float:
    """Lowest x3 reached by the shadow cap of the source (0, 0, -R)."""
    return g.R - 2.0 * g.R0**2 / g.R


def fibonacci_sphere(n: int, radius: float = 1.0, seed: int | None = None) -> np.ndarray:
    """Golden-angle lattice of ``n`` nearly uniform points.

    A non-``None`` seed applies a reproducible random rotation to the lattice.
    """
    i = np.arange(n, dtype=float) + 0.5
    cos_t = 1.0 - 2.0 * i / n
    sin_t = np.sqrt(np.clip(1.0 - cos_t * cos_t, 0.0, None))
    ang = math.pi * (3.0 - math.sqrt(5.0)) * np.arange(n)
    pts = np.stack([sin_t * np.cos(ang), sin_t * np.sin(ang), cos_t], axis=1)
    if seed is not None:
        rng = np.random.default_rng(seed)
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        a, b, c, d = q
        rot = np.array([
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
        ])
        pts = pts @ rot.T
    return radius * pts


def coverage_of(g: BallGeometry, y, sources, n_samples: int, seed: int, ell: float = float("nan")) -> CoverageReport:
    """Sample ``S``, keep the shadow of ``y`` and count points no source lights."""
    if n_samples < 1:
        raise GeometryError("n_samples must be >= 1")
    y = np.asarray(y, dtype=float)
    pts = fibonacci_sphere(n_samples, g.R, seed)
    shadow = is_shadowed(pts, y, g)
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    # light deficit: how far the best-placed source is from lighting x
    lit = np.stack([np.einsum("ij,ij->i", pts, z - pts) for z in sources], axis=1)
    best = lit.max(axis=1)
    uncovered = shadow & ~(best > 0)
    worst = None
    if uncovered.any():
        cand = np.flatnonzero(uncovered)
        worst = pts[cand[np.argmin(best[cand])]]  # argmin picks the smallest index on ties
    return CoverageReport(
        n_samples=int(n_samples),
        n_shadowed=int(shadow.sum()),
        n_uncovered=int(uncovered.sum()),
        worst_point=worst,
        ell=float(ell),
    )


def coverage_check(g: BallGeometry, ell: float, n_samples: int, seed: int = 0) -> CoverageReport:
    """Check that the canonical triad's lit caps cover the shadow of ``y = (0, 0, -R)``."""
    y = np.array([0.0, 0.0, -g.R])
    return coverage_of(g, y, canonical_triad(g.R, ell), n_samples, seed, ell)


def remark1_lambda_min(g: BallGeometry) -> float:
    den = g.R**2 - math.sqrt(2.0) * g.R0**2
    if g.R <= math.sqrt(2.0) * g.R0 or den <= 0:
        raise GeometryError("a single auxiliary source needs R > sqrt(2) R0")
    return g.R**2 / den


def remark1_source(g: BallGeometry, y, lam: float) -> np.ndarray:
    """Single auxiliary source ``-lam * y`` replacing the triad when R > sqrt(2) R0."""
    lam_min = remark1_lambda_min(g)
    if lam < lam_min:
        raise GeometryError(f"lambda={lam} below the minimum {lam_min:.6f}")
    return -lam * np.asarray(y, dtype=float)
