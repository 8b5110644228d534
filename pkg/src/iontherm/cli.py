"""
Command-line entry point.

    iontherm heating-levels  [--config F] [--out DIR] [--seed N] [--mode M] [--ensemble N]
    iontherm detuning-sweep  ...
    iontherm axis-rotation   ...
    iontherm fit-image IMAGE.pgm [--pixel-pitch-nm P] [--fit-rotation]
    iontherm fit-spectrum SCAN.csv [--free-linewidth]
    iontherm selftest

Exit status: 0 success, 1 pipeline error, 2 configuration error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .dynamics import principal_axis_angle
from .experiments import ExperimentSpec, default_lorentz_min, run_experiment
from .fitters import SpectrumScan, fit_ion_image, fit_spectrum
from .imaging import read_pgm
from .physcore import Config, ConfigError, load_config
from .selftest import run_selftest
from .thermometry import (MODES, ResolutionBounds, natural_linewidth_hz, spatial_thermometry,
                          spectroscopic_thermometry)

EXIT_OK, EXIT_PIPELINE, EXIT_CONFIG = 0, 1, 2


def _seed(text):
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _common(p):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=_seed, default=0, help="RNG seed (u64, default 0)")
    p.add_argument("--mode", choices=MODES, help="temperature formula convention")
    p.add_argument("--ensemble", type=int, help="trajectories per simulated point")


def build_parser():
    parser = argparse.ArgumentParser(prog="iontherm", description="Spatial and Doppler thermometry of a trapped ion")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("heating-levels", "images and spatial temperatures at several noise levels"),
                       ("detuning-sweep", "temperature versus detuning, both methods"),
                       ("axis-rotation", "per-axis temperatures as the trap axes rotate")):
        _common(sub.add_parser(name, help=text))
    p = sub.add_parser("fit-image", help="fit a PGM ion image and report spatial temperatures")
    p.add_argument("image")
    p.add_argument("--pixel-pitch-nm", type=float, help="object-plane pitch if the image has no sidecar")
    p.add_argument("--fit-rotation", action="store_true", help="fit the spot rotation angle")
    _common(p)
    p = sub.add_parser("fit-spectrum", help="fit a fluorescence scan CSV and report the Doppler temperature band")
    p.add_argument("scan")
    p.add_argument("--free-linewidth", action="store_true", help="fit the laser linewidth instead of fixing it")
    _common(p)
    sub.add_parser("selftest", help="run the built-in invariant checks")
    return parser


def _load(args):
    cfg = load_config(args.config) if args.config else Config()
    if args.ensemble is not None and args.ensemble < 1:
        raise ConfigError([("--ensemble", "must be >= 1")])
    return cfg


def _experiment(args, out):
    cfg = _load(args)
    outdir = Path(args.out or f"out/{args.command}")
    spec = ExperimentSpec(args.command, cfg, outdir, args.seed, args.ensemble, mode=args.mode,
                          config_path=args.config)
    result = run_experiment(spec)
    for name, rows in result.tables.items():
        print(f"{name}: {len(rows)} rows", file=out)
    for f in result.files:
        print(f"wrote {f}", file=out)


def _fit_image(args, out):
    cfg = _load(args)
    pitch = args.pixel_pitch_nm * 1e-9 if args.pixel_pitch_nm else None
    image = read_pgm(args.image, pixel_pitch=pitch)
    mode = args.mode or cfg.thermometry.mode
    fit = fit_ion_image(image, fit_rotation=args.fit_rotation)
    print(fit.to_text(), file=out)
    th = cfg.thermometry
    temps = spatial_thermometry(image, cfg.trap, cfg.ion, ResolutionBounds(th.w_lo, th.w_hi), th.w_nominal, mode,
                                fit_rotation=args.fit_rotation, axis_angle=principal_axis_angle(cfg.trap, cfg.laser),
                                fit=None if image.truncated else fit)
    for t in temps:
        print(f"# axis {t.axis}", file=out)
        print(t.to_text(), file=out)


def _fit_spectrum(args, out):
    cfg = _load(args)
    scan = SpectrumScan.from_csv(args.scan)
    mode = args.mode or cfg.thermometry.mode
    fit = fit_spectrum(scan, laser_linewidth=cfg.laser.linewidth, fix_linewidth=not args.free_linewidth)
    print(fit.to_text(), file=out)
    band = spectroscopic_thermometry(scan, cfg.ion, natural_linewidth_hz(cfg.ion), default_lorentz_min(cfg),
                                     mode, fit=fit)
    print(band.to_text(), file=out)


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "selftest":
            return EXIT_OK if run_selftest(out) else EXIT_PIPELINE
        if args.command == "fit-image":
            _fit_image(args, out)
        elif args.command == "fit-spectrum":
            _fit_spectrum(args, out)
        else:
            _experiment(args, out)
    except ConfigError as exc:
        print(f"iontherm: configuration error: {exc}", file=err)
        return EXIT_CONFIG
    except (ValueError, RuntimeError, OSError, np.linalg.LinAlgError) as exc:
        print(f"iontherm: {args.command} failed: {type(exc).__name__}: {exc}", file=err)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
