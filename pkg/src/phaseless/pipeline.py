"""Run configuration and the synth -> extract -> invert -> evaluate driver."""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geometry as geo
from .extraction import RaySampleSet, assemble_ray_samples
from .forward import KSweep, PhaselessDataset, synth_dataset
from .grid import VoxelField, save_grid
from .inversion import (
    Reconstruction,
    assemble_kinematic_linearized,
    assemble_tomography,
    bent_ray_refine,
    evaluate,
    grid_for_ball,
    inversion_grid,
    ray_coverage,
    sirt_solve,
)
from .phantom import BumpSum, PhantomError, load_phantom, save_phantom

log = logging.getLogger(__name__)

MODELS = ("schrodinger", "helmholtz")
ELL_MARGIN = 1.05

KM_NOTE = ("k_m reading: schrodinger records are sampled at k_m = (pi/2 + 2 pi m) / (|x - z| - |x - y|), "
           "where the cross term's cosine vanishes and its sine equals 1")
MERIDIAN_NOTE = ("meridian intersection reading: second point of C(z) on x1 = 0 uses "
                 "xi_2 = 2 ell R^2 sin(phi) / (R^2 + ell^2 sin^2 phi), i.e. 4 ell R^2 / (4 R^2 + ell^2) "
                 "at phi = pi/6 (4.8 for R = 5, ell = 7.5)")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class RunConfig:
    R0: float
    R: float
    model: str
    phantom: str
    ell: float | str = "auto"
    n1: float | None = None
    sources: int = 64
    placement: str = "fibonacci"
    receiver_density: int = 200
    sweep: dict | None = None
    count_m: int = 8
    grid_dims: int = 48
    grid_spacing: float | None = None
    forward_spacing: float | None = None
    iterations: int = 200
    relaxation: float = 1.0
    bent_ray: int = 0
    noise: float = 0.0
    seed: int = 0
    output: str = "run"

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "RunConfig":
        d = dict(d)
        geom = d.pop("geometry", None)
        if geom is not None:
            d.setdefault("R0", geom.get("R0"))
            d.setdefault("R", geom.get("R"))
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        for key in ("R0", "R", "model", "phantom"):
            if d.get(key) is None:
                raise ConfigError(f"missing required key {key!r}")
        if base is not None:
            for key in ("phantom", "output"):
                if key in d and not Path(d[key]).is_absolute():
                    d[key] = str(base / d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(raw, base=path.parent)


def _number(cfg: RunConfig, name: str, positive: bool = True) -> float:
    v = getattr(cfg, name)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{name} must be a finite number, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(f"{name} must be positive")
    return float(v)


def default_sweep(model: str, ell: float) -> dict:
    if model == "schrodinger":
        return {"k0": 1000.0, "k_max": 5000.0, "count": 8}
    dk = 0.9 * math.pi / ell
    return {"k0": 50.0, "k_max": 50.0 + dk * 1023, "count": 1024}


def validate_config(cfg: RunConfig) -> tuple[RunConfig, list[str]]:
    """Fill defaults and cross-check the configuration; returns the normalised copy and notes."""
    notes: list[str] = []
    R0 = _number(cfg, "R0")
    R = _number(cfg, "R")
    try:
        g = geo.BallGeometry(R0, R)
    except geo.GeometryError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.model not in MODELS:
        raise ConfigError(f"model must be one of {MODELS}, got {cfg.model!r}")
    if not Path(cfg.phantom).is_file():
        raise ConfigError(f"phantom file {cfg.phantom} does not exist")
    try:
        phantom = load_phantom(cfg.phantom)
    except (PhantomError, json.JSONDecodeError, OSError) as exc:
        raise ConfigError(f"phantom file {cfg.phantom}: {exc}") from exc

    n1 = cfg.n1
    if cfg.model == "helmholtz":
        n1 = float(n1) if n1 is not None else phantom.max_value()
        if n1 < 1:
            raise ConfigError("n1 must be >= 1")
    else:
        n1 = None
    try:
        phantom.validate(g, n1)
    except PhantomError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.model == "helmholtz" and phantom.baseline != 1.0:
        raise ConfigError("helmholtz model needs a refractive-index phantom (baseline 1)")
    if cfg.model == "schrodinger" and phantom.baseline != 0.0:
        raise ConfigError("schrodinger model needs a potential phantom (baseline 0)")

    threshold = geo.ell_threshold(g, cfg.model, n1 if n1 is not None else 1.0)
    if cfg.ell == "auto" or cfg.ell is None:
        ell = threshold * ELL_MARGIN
        notes.append(f"ell auto-resolved to {ell:.6g} ({ELL_MARGIN} x threshold {threshold:.6g})")
    else:
        ell = _number(cfg, "ell")
        if cfg.model == "schrodinger" and not ell > geo.min_ell_schrodinger(g):
            raise ConfigError(f"ell={ell:.6g} violates Theorem 1 condition ell > R*sqrt(8) = {geo.min_ell_schrodinger(g):.6g}")
        if cfg.model == "helmholtz" and not ell > geo.min_ell_helmholtz(g, n1):
            raise ConfigError(f"ell={ell:.6g} violates Theorem 2 condition ell > R*sqrt((1+2 n1)^2-1) = {geo.min_ell_helmholtz(g, n1):.6g}")
        if ell < geo.ell_star(g):
            raise ConfigError(f"ell={ell:.6g} below ell*={geo.ell_star(g):.6g} (Lemma 1 coverage)")

    sweep = dict(default_sweep(cfg.model, ell)) if cfg.sweep is None else dict(cfg.sweep)
    if set(sweep) - {"k0", "k_max", "count"}:
        raise ConfigError(f"unknown sweep keys {sorted(set(sweep) - {'k0', 'k_max', 'count'})}")
    for key in ("k0", "k_max", "count"):
        if key not in sweep:
            raise ConfigError(f"sweep needs {key!r}")
    try:
        ks = KSweep(float(sweep["k0"]), float(sweep["k_max"]), int(sweep["count"]),
                    "km" if cfg.model == "schrodinger" else "uniform")
    except ValueError as exc:
        raise ConfigError(f"sweep: {exc}") from exc
    if cfg.model == "helmholtz":
        # lit receivers satisfy |x - z| < ell, which bounds rho
        if not ks.step < math.pi / ell:
            raise ConfigError(f"sweep step {ks.step:.4g} violates the Nyquist rule dk < pi/rho_max = {math.pi / ell:.4g}")
        if ks.count < 8:
            raise ConfigError("helmholtz sweep needs at least 8 samples")

    for name in ("sources", "receiver_density", "grid_dims", "iterations", "count_m"):
        v = getattr(cfg, name)
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise ConfigError(f"{name} must be a positive integer")
    if cfg.count_m < 2:
        raise ConfigError("count_m must be >= 2")
    if cfg.model == "schrodinger" and cfg.count_m > ks.count:
        raise ConfigError(f"count_m={cfg.count_m} exceeds the sweep count {ks.count}")
    if cfg.placement not in ("fibonacci", "rotated"):
        raise ConfigError(f"unknown placement rule {cfg.placement!r}")
    if not 0 < cfg.relaxation <= 2:
        raise ConfigError("relaxation must lie in (0, 2]")
    if isinstance(cfg.bent_ray, bool) or not isinstance(cfg.bent_ray, int) or cfg.bent_ray < 0:
        raise ConfigError("bent_ray must be a non-negative integer")
    if cfg.bent_ray and cfg.model != "helmholtz":
        raise ConfigError("bent-ray refinement applies to the helmholtz (kinematic) model only")
    if cfg.noise < 0:
        raise ConfigError("noise must be non-negative")
    for name in ("grid_spacing", "forward_spacing"):
        if getattr(cfg, name) is not None:
            _number(cfg, name)
    if cfg.model == "schrodinger":
        notes.append(KM_NOTE)
    notes.append(MERIDIAN_NOTE)
    out = replace(cfg, ell=float(ell), n1=n1, sweep={"k0": ks.k0, "k_max": ks.k_max, "count": ks.count})
    return out, notes


def source_positions(cfg: RunConfig) -> np.ndarray:
    seed = cfg.seed if cfg.placement == "rotated" else None
    return geo.fibonacci_sphere(cfg.sources, cfg.R, seed)


def reconstruction_grid(cfg: RunConfig) -> VoxelField:
    """Cubic grid of ``grid_dims`` voxels per axis over ``[-1.25 R, 1.25 R]^3`` unless a spacing is given."""
    if cfg.grid_spacing is not None:
        return inversion_grid((cfg.grid_dims,) * 3, cfg.grid_spacing)
    return grid_for_ball(1.25 * cfg.R, cfg.grid_dims, 1.0)


def synthesize(cfg: RunConfig, phantom: BumpSum) -> PhaselessDataset:
    sw = cfg.sweep
    sweep = KSweep(sw["k0"], sw["k_max"], sw["count"], "km" if cfg.model == "schrodinger" else "uniform")
    return synth_dataset(
        geo.BallGeometry(cfg.R0, cfg.R), phantom, cfg.model, source_positions(cfg), cfg.ell, sweep,
        cfg.receiver_density, n1=cfg.n1, grid_spacing=cfg.forward_spacing, noise=cfg.noise, seed=cfg.seed,
    )


def invert(samples: RaySampleSet, grid: VoxelField, R0: float, R: float, iterations: int,
           relaxation: float = 1.0, bent_ray: int = 0) -> tuple[Reconstruction, dict]:
    """Solve the reduced problem matching the sample kind; returns the model and diagnostics."""
    mask = grid.ball_mask(R0)
    if samples.kind == "line_integral":
        system = assemble_tomography(samples, grid)
    else:
        system = assemble_kinematic_linearized(samples, grid)
    recon = sirt_solve(system, iterations, relaxation, mask)
    info = {
        "rays": int(system.n_rows),
        "clamped": int(system.n_clamped),
        "coverage": ray_coverage(system, mask),
        "sirt_residual": recon.residual_history[-1],
    }
    if bent_ray:
        if samples.kind != "travel_time":
            raise ValueError("bent-ray refinement needs travel-time samples")
        recon = bent_ray_refine(samples, grid, bent_ray, recon, R, sirt_iterations=iterations,
                                relaxation=relaxation)
        info["bent_ray_misfit"] = recon.residual_history
    return recon, info


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ValueError, RuntimeError) as exc:
        raise StageError(name, str(exc)) from exc


def run_end_to_end(cfg: RunConfig) -> dict:
    """Synthesise, extract, invert and evaluate; writes every artifact under ``cfg.output``."""
    cfg, notes = validate_config(cfg)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    phantom = load_phantom(cfg.phantom)
    save_phantom(out / "phantom.json", phantom)

    t = time.perf_counter()
    ds = _stage("synth", synthesize, cfg, phantom)
    ds.save(out / "dataset.phld")
    timings["synth"] = time.perf_counter() - t

    t = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        samples = _stage("extract", assemble_ray_samples, ds, cfg.count_m)
    samples.save(out / "samples.jsonl")
    timings["extract"] = time.perf_counter() - t

    t = time.perf_counter()
    grid = reconstruction_grid(cfg)
    recon, info = _stage("invert", invert, samples, grid, cfg.R0, cfg.R, cfg.iterations,
                         cfg.relaxation, cfg.bent_ray)
    save_grid(out / "reconstruction.vxf", recon.field)
    timings["invert"] = time.perf_counter() - t

    t = time.perf_counter()
    metrics = _stage("evaluate", evaluate, recon, phantom)
    metrics["reconstruction_norm"] = float(np.linalg.norm(recon.field.values[recon.mask]))
    timings["evaluate"] = time.perf_counter() - t

    run_warnings = list(dict.fromkeys(notes + samples.warnings + [str(w.message) for w in caught] + recon.notes))
    if info["clamped"]:
        run_warnings.append(f"{info['clamped']} negative travel-time anomalies clamped to zero")
    report = {
        "config": cfg.to_dict(),
        "records": ds.n_records,
        "samples": len(samples),
        "failed_records": samples.n_failed,
        "dedup_spread": {
            "max": float(samples.spread.max()) if len(samples) else 0.0,
            "median": float(np.median(samples.spread)) if len(samples) else 0.0,
        },
        "inversion": info,
        "metrics": metrics,
        "warnings": run_warnings,
        "artifacts": {
            "phantom": "phantom.json",
            "dataset": "dataset.phld",
            "samples": "samples.jsonl",
            "reconstruction": "reconstruction.vxf",
        },
        "timings": timings,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
