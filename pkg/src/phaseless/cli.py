"""Command-line entry point: ``phaseless <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import geometry as geo
from .extraction import RaySampleSet, assemble_ray_samples
from .forward import PhaselessDataset
from .grid import load_grid, save_grid
from .inversion import evaluate, inversion_grid
from .phantom import load_phantom
from .pipeline import ConfigError, StageError, invert, load_config, run_end_to_end, synthesize, validate_config

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _geometry_check(args) -> int:
    try:
        g = geo.BallGeometry(args.r0, args.r)
        if args.ell == "auto":
            ell = geo.ell_threshold(g, args.model, args.n1)
        else:
            ell = float(args.ell)
    except (ValueError, geo.GeometryError) as exc:
        raise ConfigError(str(exc)) from exc
    if args.samples < 1:
        raise ConfigError("--samples must be >= 1")
    report = geo.coverage_check(g, ell, args.samples, args.seed)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def _synth(args) -> int:
    cfg, notes = validate_config(load_config(args.config))
    phantom = load_phantom(cfg.phantom)
    try:
        ds = synthesize(cfg, phantom)
    except ValueError as exc:
        raise StageError("synth", str(exc)) from exc
    ds.save(args.out)
    for n in notes:
        print(f"note: {n}", file=sys.stderr)
    print(f"wrote {ds.n_records} records to {args.out}")
    return EXIT_OK


def _extract(args) -> int:
    try:
        ds = PhaselessDataset.load(args.inp)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{args.inp}: {exc}") from exc
    try:
        samples = assemble_ray_samples(ds, args.count_m)
    except ValueError as exc:
        raise StageError("extract", str(exc)) from exc
    samples.save(args.out)
    for w in samples.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {len(samples)} {samples.kind} samples to {args.out}")
    return EXIT_OK


def _parse_grid(text: str):
    parts = text.split(",")
    if len(parts) != 4:
        raise ConfigError("--grid expects nx,ny,nz,spacing")
    try:
        dims = tuple(int(p) for p in parts[:3])
        spacing = float(parts[3])
    except ValueError as exc:
        raise ConfigError(f"--grid: {exc}") from exc
    if min(dims) < 2 or not spacing > 0:
        raise ConfigError("--grid needs dims >= 2 and a positive spacing")
    return dims, spacing


def _invert(args) -> int:
    dims, spacing = _parse_grid(args.grid)
    try:
        samples = RaySampleSet.load(args.samples)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"{args.samples}: {exc}") from exc
    want = "line_integral" if args.model == "tomo" else "travel_time"
    if samples.kind != want:
        raise ConfigError(f"--model {args.model} needs {want} samples, file holds {samples.kind}")
    if args.bent_ray and args.model != "kinematic":
        raise ConfigError("--bent-ray applies to --model kinematic only")
    R = args.r if args.r is not None else float(np.median(np.linalg.norm(samples.y, axis=1)))
    r0 = args.r0 if args.r0 is not None else R
    grid = inversion_grid(dims, spacing)
    try:
        recon, info = invert(samples, grid, r0, R, args.iters, args.relaxation, args.bent_ray)
    except ValueError as exc:
        raise StageError("invert", str(exc)) from exc
    save_grid(args.out, recon.field)
    print(json.dumps({k: v for k, v in info.items() if k != "bent_ray_misfit"}))
    return EXIT_OK


def _evaluate(args) -> int:
    try:
        field_ = load_grid(args.recon)
        phantom = load_phantom(args.phantom)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    mask = field_.ball_mask(args.r0) if args.r0 is not None else None
    try:
        metrics = evaluate(field_, phantom, mask=mask)
    except ValueError as exc:
        raise StageError("evaluate", str(exc)) from exc
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text)
    print(text)
    return EXIT_OK


def _end2end(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.output = args.out
    report = run_end_to_end(cfg)
    m = report["metrics"]
    print(f"records {report['records']}, samples {report['samples']}, "
          f"relative L2 {m['relative_l2']:.4g}, max error {m['max_error']:.4g}")
    for w in report["warnings"]:
        print(f"warning: {w}")
    print(f"report: {Path(cfg.output) / 'report.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phaseless", description="Phaseless inverse scattering reductions.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("geometry-check", help="sample the shadow cover of the auxiliary source triad")
    s.add_argument("--r0", type=float, required=True)
    s.add_argument("--r", type=float, required=True)
    s.add_argument("--ell", default="auto", help="circumradius or 'auto'")
    s.add_argument("--model", choices=("schrodinger", "helmholtz"), default="schrodinger")
    s.add_argument("--n1", type=float, default=1.0)
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_geometry_check)

    s = sub.add_parser("synth", help="tabulate phaseless data from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_synth)

    s = sub.add_parser("extract", help="reduce a dataset to ray samples")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--count-m", type=int, default=8)
    s.set_defaults(func=_extract)

    s = sub.add_parser("invert", help="SIRT reconstruction from ray samples")
    s.add_argument("--samples", required=True)
    s.add_argument("--grid", required=True, help="nx,ny,nz,spacing")
    s.add_argument("--model", choices=("tomo", "kinematic"), required=True)
    s.add_argument("--bent-ray", type=int, default=0)
    s.add_argument("--iters", type=int, default=200)
    s.add_argument("--relaxation", type=float, default=1.0)
    s.add_argument("--r0", type=float, default=None, help="support radius (default: no mask beyond R)")
    s.add_argument("--r", type=float, default=None, help="outer radius (default: from the sources)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_invert)

    s = sub.add_parser("evaluate", help="compare a reconstruction with its phantom")
    s.add_argument("--recon", required=True)
    s.add_argument("--phantom", required=True)
    s.add_argument("--report", default=None)
    s.add_argument("--r0", type=float, default=None, help="restrict to |x| < r0")
    s.set_defaults(func=_evaluate)

    s = sub.add_parser("end2end", help="synth, extract, invert and evaluate from one config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None, help="override the output directory")
    s.set_defaults(func=_end2end)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
