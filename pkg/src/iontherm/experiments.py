"""
End-to-end studies: controlled white-noise heating, detuning dependence with
both thermometry methods, and anisotropic cooling under trap-axis rotation.

Every study is a pure function of (config, seed). Sweep points and images
draw seeds derived from (seed, study tag, indices), and all numbers are
written with a fixed format, so repeated runs give byte-identical files.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import (balance_temperatures, cooling_rate, laser_projection, principal_axis_angle,
                       simulate_spectral_scan, steady_state_anisotropic)
from .fitters import fit_ion_image, fit_spectrum
from .imaging import render_from_trajectory, write_pgm
from .physcore import TWO_PI, Config, NoiseDriveConfig
from .thermometry import (ResolutionBounds, power_broadened_linewidth_hz, natural_linewidth_hz,
                          spatial_thermometry, spectroscopic_thermometry)

EXPERIMENTS = ("heating-levels", "detuning-sweep", "axis-rotation")

_TAG_HEAT, _TAG_SWEEP, _TAG_SCAN, _TAG_ROT, _TAG_OPT = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: str
    config: Config = field(default_factory=Config)
    out_dir: Path | None = None
    seed: int = 0
    ensemble: int | None = None
    grid: tuple | None = None  # detunings (rad/s) or angles (deg) overriding the config grid
    levels: tuple | None = None  # subset of heating-level indices
    mode: str | None = None  # overrides thermometry.mode
    config_path: str | None = None

    def violations(self):
        out = []
        if self.experiment not in EXPERIMENTS:
            out.append(("experiment", f"must be one of {EXPERIMENTS}"))
        if self.ensemble is not None and not self.ensemble >= 1:
            out.append(("ensemble", "must be >= 1"))
        if self.grid is not None:
            d = np.diff(np.asarray(self.grid, dtype=float))
            if len(self.grid) == 0 or not (np.all(d > 0) or np.all(d < 0)):
                out.append(("grid", "must be non-empty and strictly monotone"))
        return out

    @property
    def thermometry_mode(self):
        return self.mode or self.config.thermometry.mode


@dataclass
class ExperimentResult:
    tables: dict  # name -> list of row dicts
    files: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def derive_seed(seed, *tags):
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9e}"
    return str(v)


def write_rows(rows, path):
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(list(rows[0]))
        for r in rows:
            out.writerow([_fmt(v) for v in r.values()])
    return Path(path)


def _experiment_imaging(cfg):
    return replace(cfg.imaging, width=cfg.experiment.image_width, height=cfg.experiment.image_height)


def _bounds(cfg):
    th = cfg.thermometry
    return ResolutionBounds(th.w_lo, th.w_hi)


def heating_levels(cfg):
    """(index, relative voltage, NoiseDriveConfig) for every configured heating level."""
    ex = cfg.experiment
    return [(i, v, replace(cfg.noise, force_psd=ex.noise_psd_ref * v * v))
            for i, v in enumerate(ex.noise_voltages)]


def point_duration(cfg, trap, laser):
    """Simulated time for one steady-state point: a fixed number of cooling times, capped."""
    c2 = laser_projection(trap) ** 2
    gamma = cooling_rate(laser.detuning, laser.saturation, cfg.ion) * c2.min()
    ex = cfg.experiment
    if not gamma > 0:
        return ex.max_point_duration
    return min(ex.relaxation_times / gamma, ex.max_point_duration)


def _image_and_temperatures(cfg, result, trap, laser, seed, mode, fit_rotation=False):
    imaging = _experiment_imaging(cfg)
    image = render_from_trajectory(result.trajectory, imaging, imaging.n_photons, seed=seed)
    fit = None
    if not image.truncated:
        fit = fit_ion_image(image, fit_rotation=fit_rotation)
    temps = spatial_thermometry(image, trap, cfg.ion, _bounds(cfg), cfg.thermometry.w_nominal, mode,
                                fit_rotation=fit_rotation, axis_angle=principal_axis_angle(trap, laser),
                                fit=fit)
    return image, fit, temps


def _level_subset(spec, cfg):
    levels = heating_levels(cfg)
    if spec.levels is not None:
        levels = [levels[i] for i in spec.levels]
    return levels


def _prepare(spec, name):
    bad = spec.violations()
    if bad:
        raise ValueError("; ".join(f"{k}: {m}" for k, m in bad))
    if spec.experiment != name:
        raise ValueError(f"spec is for {spec.experiment!r}, not {name!r}")
    out = Path(spec.out_dir) if spec.out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    return spec.config, out


# ---------------------------------------------------------------------------
# controlled heating
# ---------------------------------------------------------------------------

def run_heating_levels(spec):
    """Steady state, image and spatial temperatures for each heating level."""
    cfg, out = _prepare(spec, "heating-levels")
    mode = spec.thermometry_mode
    rows, files = [], []
    for i, volt, noise in _level_subset(spec, cfg):
        res = steady_state_anisotropic(cfg.trap, cfg.laser, noise, cfg.ion, cfg.sim,
                                       seed=derive_seed(spec.seed, _TAG_HEAT, i), ensemble=spec.ensemble,
                                       duration=point_duration(cfg, cfg.trap, cfg.laser))
        balance, _ = balance_temperatures(cfg.trap, cfg.laser, noise, cfg.ion, cfg.sim.emission_factor)
        image, fit, temps = _image_and_temperatures(cfg, res, cfg.trap, cfg.laser,
                                                    derive_seed(spec.seed, _TAG_HEAT, i, 1), mode)
        if out is not None:
            files.append(write_pgm(image, out / f"heating_level_{i}.pgm"))
        for a, t in enumerate(temps):
            rows.append({
                "level": i, "noise_voltage_rel": float(volt), "force_psd_N2_per_Hz": float(noise.force_psd),
                "axis": t.axis, "method": t.method, "mode": mode,
                "T_K": t.T, "stat_err_K": t.stat_err, "sys_lo_K": t.sys_lo, "sys_hi_K": t.sys_hi,
                "flags": ";".join(t.flags),
                "w_obs_m": t.details.get("w_obs_m", float("nan")),
                "w_err_m": t.details.get("w_err_m", float("nan")),
                "T_dynamics_K": float(res.T[a]), "T_dynamics_err_K": float(res.stat_err[a]),
                "converged": bool(res.converged[a]), "T_balance_K": float(balance[a]),
            })
    if out is not None:
        files.append(write_rows(rows, out / "heating_levels.csv"))
    return ExperimentResult({"heating_levels": rows}, files)


# ---------------------------------------------------------------------------
# detuning dependence
# ---------------------------------------------------------------------------

def sweep_point(cfg, noise, detuning, seed, ensemble=None, mode="physical", with_image=True):
    """Steady state at one detuning plus (optionally) the image-based temperatures."""
    laser = replace(cfg.laser, detuning=detuning)
    res = steady_state_anisotropic(cfg.trap, laser, noise, cfg.ion, cfg.sim, seed=seed, ensemble=ensemble,
                                   duration=point_duration(cfg, cfg.trap, laser), keep_samples=with_image)
    temps = None
    if with_image:
        _, _, temps = _image_and_temperatures(cfg, res, cfg.trap, laser, derive_seed(seed, 1), mode)
    return res, temps


def detuning_curve(cfg, noise, grid, seed, level=0, ensemble=None, mode="physical", with_image=True):
    """Rows of the detuning sweep for one heating level."""
    rows = []
    for j, delta in enumerate(grid):
        res, temps = sweep_point(cfg, noise, delta, derive_seed(seed, _TAG_SWEEP, level, j), ensemble,
                                 mode, with_image)
        T = float(res.T.mean())
        err = float(math.hypot(*res.stat_err) / 2.0)
        row = {"level": level, "delta_MHz": delta / TWO_PI / 1e6, "mode": mode,
               "T_dynamics_K": T, "T_dynamics_err_K": err,
               "converged": bool(np.all(res.converged))}
        if temps is not None:
            for t in temps:
                row[f"T_spatial_{t.axis}_K"] = t.T
                row[f"T_spatial_{t.axis}_stat_err_K"] = t.stat_err
                row[f"T_spatial_{t.axis}_sys_lo_K"] = t.sys_lo
                row[f"T_spatial_{t.axis}_sys_hi_K"] = t.sys_hi
            flags = sorted({f for t in temps for f in t.flags})
            row["flags"] = ";".join(flags)
        rows.append(row)
    return rows


def scan_detunings(cfg):
    ex = cfg.experiment
    return np.linspace(ex.scan_start, ex.scan_stop, ex.scan_points)


def spectroscopic_levels(cfg, seed, levels=None, ensemble=None, mode="physical"):
    """Dynamics-active spectral sweep and temperature band for each heating level.

    Also reports the simulated steady-state temperature at the configured
    (optimum) detuning as the reference the band is compared with.
    """
    levels = heating_levels(cfg) if levels is None else levels
    det = scan_detunings(cfg)
    scans, fits = [], []
    for i, _, noise in levels:
        scan, lost = simulate_spectral_scan(cfg.with_(noise=noise), det, cfg.experiment.scan_dwell,
                                            seed=derive_seed(seed, _TAG_SCAN, i), ensemble=ensemble)
        scans.append((scan, lost))
        fits.append(fit_spectrum(scan, laser_linewidth=cfg.laser.linewidth, fix_linewidth=True))

    natural = natural_linewidth_hz(cfg.ion)
    if cfg.thermometry.lorentz_min > 0:
        lorentz_min = cfg.thermometry.lorentz_min
    else:
        lorentz_min = min(float(f.params[2]) for f in fits)
    lorentz_min = max(lorentz_min, natural)

    rows = []
    for (i, volt, noise), (scan, lost), fit in zip(levels, scans, fits):
        band = spectroscopic_thermometry(scan, cfg.ion, natural, lorentz_min, mode, fit=fit)
        ref = steady_state_anisotropic(cfg.trap, cfg.laser, noise, cfg.ion, cfg.sim,
                                       seed=derive_seed(seed, _TAG_OPT, i), ensemble=ensemble,
                                       duration=point_duration(cfg, cfg.trap, cfg.laser), keep_samples=False)
        rows.append({
            "level": i, "noise_voltage_rel": float(volt), "mode": mode,
            "gamma_t_MHz": fit.params[2] / 1e6, "gamma_t_err_MHz": fit.errors[2] / 1e6,
            "nu0_MHz": fit.params[1] / 1e6, "gamma_l_natural_MHz": natural / 1e6,
            "gamma_l_min_MHz": lorentz_min / 1e6,
            "T_K": band.T, "stat_err_K": band.stat_err, "sys_lo_K": band.sys_lo, "sys_hi_K": band.sys_hi,
            "flags": ";".join(band.flags), "lost_members": lost,
            "T_steady_optimum_K": float(ref.T.mean()),
            "T_steady_optimum_err_K": float(math.hypot(*ref.stat_err) / 2.0),
        })
    return rows, [s for s, _ in scans]


def run_detuning_sweep(spec):
    """Image-based T(delta) for every heating level plus one spectroscopic band per level."""
    cfg, out = _prepare(spec, "detuning-sweep")
    mode = spec.thermometry_mode
    grid = np.asarray(spec.grid if spec.grid is not None else cfg.experiment.detuning_grid, dtype=float)
    if np.any(grid >= 0):
        raise ValueError("detuning grid must be red of resonance (negative)")
    levels = _level_subset(spec, cfg)
    rows = []
    for i, volt, noise in levels:
        rows += detuning_curve(cfg, noise, grid, spec.seed, i, spec.ensemble, mode)
    spectro, scans = spectroscopic_levels(cfg, spec.seed, levels, spec.ensemble, mode)
    files = []
    if out is not None:
        files.append(write_rows(rows, out / "detuning_sweep.csv"))
        files.append(write_rows(spectro, out / "spectroscopic.csv"))
        for (i, _, _), scan in zip(levels, scans):
            path = out / f"spectrum_level_{i}.csv"
            scan.to_csv(path)
            files.append(path)
    return ExperimentResult({"detuning_sweep": rows, "spectroscopic": spectro}, files)


def curve_minimum(delta, T):
    """Location of the minimum of T(delta) from a parabola in log|delta| through the lowest points."""
    delta = np.asarray(delta, dtype=float)
    T = np.asarray(T, dtype=float)
    i = int(np.argmin(T))
    if i == 0 or i == len(T) - 1:
        return float(delta[i]), i
    lo, hi = max(i - 2, 0), min(i + 3, len(T))
    x = np.log(np.abs(delta[lo:hi]))
    a, b, _ = np.polyfit(x, T[lo:hi], 2)
    if not a > 0:
        return float(delta[i]), i
    x_min = float(np.clip(-b / (2 * a), x.min(), x.max()))
    return float(math.copysign(math.exp(x_min), delta[i])), i


# ---------------------------------------------------------------------------
# anisotropic cooling
# ---------------------------------------------------------------------------

def rotation_trap(cfg):
    ex = cfg.experiment
    return replace(cfg.trap, nu_y=ex.rotation_aspect * cfg.trap.nu_x)


def run_axis_rotation(spec):
    """Per-axis temperatures as the trap axes rotate through the beam direction."""
    cfg, out = _prepare(spec, "axis-rotation")
    mode = spec.thermometry_mode
    ex = cfg.experiment
    grid = np.asarray(spec.grid if spec.grid is not None else ex.theta_grid, dtype=float)
    base = rotation_trap(cfg)
    noise = NoiseDriveConfig(force_psd=ex.rotation_noise_psd, coupling=cfg.noise.coupling)
    rows, files = [], []
    for j, theta in enumerate(grid):
        trap = replace(base, axis_rotation=float(theta))
        c2 = laser_projection(trap) ** 2
        weak = 0 if c2[0] < c2[1] else 1
        strong = 1 - weak
        res = steady_state_anisotropic(trap, cfg.laser, noise, cfg.ion, cfg.sim,
                                       seed=derive_seed(spec.seed, _TAG_ROT, j), ensemble=spec.ensemble,
                                       duration=ex.rotation_duration)
        image, fit, temps = _image_and_temperatures(cfg, res, trap, cfg.laser,
                                                    derive_seed(spec.seed, _TAG_ROT, j, 1), mode,
                                                    fit_rotation=True)
        if out is not None:
            files.append(write_pgm(image, out / f"rotation_{j:02d}.pgm"))
        flags = sorted({f for t in temps for f in t.flags})
        if not res.converged[weak]:
            flags.append("weak_lower_bound")
        if not res.converged[strong]:
            flags.append("strong_lower_bound")
        rows.append({
            "theta_deg": float(theta), "mode": mode,
            "T_weak_K": float(res.T[weak]), "T_strong_K": float(res.T[strong]),
            "T_weak_err_K": float(res.stat_err[weak]), "T_strong_err_K": float(res.stat_err[strong]),
            "weak_axis": weak + 1,
            "converged_weak": bool(res.converged[weak]), "converged_strong": bool(res.converged[strong]),
            "T_spatial_weak_K": temps[weak].T, "T_spatial_strong_K": temps[strong].T,
            "w_fit_major_m": float(max(fit.params[3], fit.params[4])) if fit is not None else float("nan"),
            "w_fit_minor_m": float(min(fit.params[3], fit.params[4])) if fit is not None else float("nan"),
            "flags": ";".join(flags),
        })
    if out is not None:
        files.append(write_rows(rows, out / "axis_rotation.csv"))
    return ExperimentResult({"axis_rotation": rows}, files)


RUNNERS = {
    "heating-levels": run_heating_levels,
    "detuning-sweep": run_detuning_sweep,
    "axis-rotation": run_axis_rotation,
}


def run_experiment(spec):
    return RUNNERS[spec.experiment](spec)


def default_lorentz_min(cfg):
    """Smallest-linewidth assumption for a single scan: the power-broadened natural linewidth."""
    if cfg.thermometry.lorentz_min > 0:
        return cfg.thermometry.lorentz_min
    return power_broadened_linewidth_hz(cfg.ion, cfg.laser.saturation)
