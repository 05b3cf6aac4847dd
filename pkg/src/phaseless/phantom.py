"""Smooth compactly supported media built from sums of bump functions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate

from .geometry import BallGeometry


class PhantomError(ValueError):
    pass


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class Bump:
    center: np.ndarray
    radius: float
    amplitude: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        if not self.radius > 0:
            raise PhantomError("bump radius must be positive")


def bump_profile(r2, rho2):
    """``exp(-r^2 / (rho^2 - r^2))`` inside the ball, exactly 0 outside."""
    r2 = np.asarray(r2, dtype=float)
    inside = r2 < rho2
    out = np.zeros_like(r2)
    out[inside] = np.exp(-r2[inside] / (rho2 - r2[inside]))
    return out


@dataclass(frozen=True)
class BumpSum:
    bumps: tuple = field(default_factory=tuple)
    baseline: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "bumps", tuple(self.bumps))

    @property
    def kind(self) -> str:
        return "n" if self.baseline == 1.0 else "q"

    def eval(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape[:-1], float(self.baseline))
        for b in self.bumps:
            r2 = np.sum((x - b.center) ** 2, axis=-1)
            out = out + b.amplitude * bump_profile(r2, b.radius**2)
        return out if out.ndim else float(out)

    __call__ = eval

    def perturbation(self, x) -> np.ndarray:
        """``eval(x) - baseline``: the part supported inside the inner ball."""
        return self.eval(x) - self.baseline

    def max_value(self) -> float:
        """Upper bound attained when bumps do not overlap; conservative otherwise."""
        return self.baseline + sum(max(b.amplitude, 0.0) for b in self.bumps)

    def validate(self, g: BallGeometry, n1: float | None = None) -> None:
        for b in self.bumps:
            if np.linalg.norm(b.center) + b.radius > g.R0 * (1 + 1e-12):
                raise PhantomError(f"bump at {b.center.tolist()} (radius {b.radius}) leaves the ball |x| < R0")
        if self.baseline == 0.0:
            if any(b.amplitude < 0 for b in self.bumps):
                raise PhantomError("potential amplitudes must be non-negative")
        elif self.baseline == 1.0:
            if any(b.amplitude < 0 for b in self.bumps):
                raise PhantomError("refractive index must stay >= 1")
            if n1 is not None and self.max_value() > n1 * (1 + 1e-12):
                raise PhantomError(f"refractive index may reach {self.max_value()} > n1={n1}")
        else:
            raise PhantomError("baseline must be 0 (potential) or 1 (refractive index)")

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "bumps": [
                {"center": b.center.tolist(), "radius": b.radius, "amplitude": b.amplitude}
                for b in self.bumps
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BumpSum":
        try:
            bumps = [Bump(np.array(b["center"], dtype=float), float(b["radius"]), float(b["amplitude"])) for b in d.get("bumps", [])]
            return cls(tuple(bumps), float(d.get("baseline", 0.0)))
        except (KeyError, TypeError) as exc:
            raise PhantomError(f"malformed phantom description: {exc}") from exc


def single_bump(center, radius: float, amplitude: float, baseline: float = 0.0) -> BumpSum:
    return BumpSum((Bump(np.asarray(center, dtype=float), radius, amplitude),), baseline)


def load_phantom(path, g: BallGeometry | None = None, n1: float | None = None) -> BumpSum:
    p = BumpSum.from_dict(json.loads(Path(path).read_text()))
    if g is not None:
        p.validate(g, n1)
    return p


def save_phantom(path, p: BumpSum) -> None:
    Path(path).write_text(json.dumps(p.to_dict(), indent=2))


@dataclass(frozen=True)
class Segment:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(3)
        b = np.asarray(self.b, dtype=float).reshape(3)
        if np.allclose(a, b, rtol=0, atol=0):
            raise PhantomError("degenerate segment")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.b - self.a))


def _clip_to_ball(a, d, length, center, radius):
    """Arc-length interval of the segment ``a + s d`` (``0 <= s <= length``) inside a ball."""
    w = a - center
    bq = float(w @ d)
    cq = float(w @ w) - radius * radius
    disc = bq * bq - cq
    if disc <= 0:
        return None
    root = math.sqrt(disc)
    s0 = max(-bq - root, 0.0)
    s1 = min(-bq + root, length)
    if s1 <= s0:
        return None
    return s0, s1


def line_integral_oracle(p: BumpSum, s: Segment, tol: float = 1e-10, include_baseline: bool = True, limit: int = 200) -> float:
    """Adaptive Gauss-Kronrod integral of ``p`` along a segment.

    Each bump is integrated only over the part of the segment inside its
    support ball. The baseline contributes ``baseline * length`` unless
    ``include_baseline`` is false.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    length = s.length
    d = (s.b - s.a) / length
    total = p.baseline * length if include_baseline else 0.0
    for bump in p.bumps:
        span = _clip_to_ball(s.a, d, length, bump.center, bump.radius)
        if span is None:
            continue
        w = s.a - bump.center
        rho2 = bump.radius**2

        def f(t, w=w, rho2=rho2):
            v = w + t * d
            r2 = float(v @ v)
            if r2 >= rho2:
                return 0.0
            return math.exp(-r2 / (rho2 - r2))

        val, err, *info = integrate.quad(f, span[0], span[1], epsabs=0.25 * tol, epsrel=0.25 * tol, limit=limit, full_output=1)
        if len(info) > 1 and err > tol * (1 + abs(val)):
            raise QuadratureError(f"quadrature did not converge: {info[1]}")
        total += bump.amplitude * val
    return float(total)


def line_integrals(p: BumpSum, a, b, tol: float = 1e-10, include_baseline: bool = True) -> np.ndarray:
    """:func:`line_integral_oracle` over paired endpoint arrays."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    a, b = np.broadcast_arrays(a, b)
    return np.array([line_integral_oracle(p, Segment(ai, bi), tol, include_baseline) for ai, bi in zip(a, b)])


def rasterize(p: BumpSum, grid, subtract_baseline: bool = True) -> np.ndarray:
    vals = p.eval(grid.node_coords())
    return vals - p.baseline if subtract_baseline else vals
