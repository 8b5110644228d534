"""
Physical constants, unit conventions and configuration types.

Unit conventions used throughout the package:

    natural linewidth Gamma, laser detuning delta   angular, rad/s
    secular frequencies nu, laser linewidth          ordinary, Hz
    lengths (spot radii, PSF radius, pixel pitch)    metres, object plane (at the ion)

Detuning is negative for a laser red of resonance. Magnification is applied
once, when converting a physical camera pixel to an object-plane pitch.
"""
from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
from scipy import constants as _sc

HBAR = _sc.hbar
KB = _sc.k
AMU = _sc.physical_constants["atomic mass constant"][0]
ELECTRON_MASS_AMU = _sc.physical_constants["electron mass in u"][0]
TWO_PI = 2.0 * math.pi

# 174Yb neutral atomic mass minus one electron
YB174_ION_MASS_AMU = 173.938859 - ELECTRON_MASS_AMU
# S1/2 - P1/2 natural linewidth Gamma/2pi; external literature constant
YB_NATURAL_LINEWIDTH_HZ = 19.6e6
YB_WAVELENGTH = 369.5e-9

# 1/e^2 radius of an ideal diffraction-limited spot, in units of lambda/NA
DIFFRACTION_FACTOR = 0.43


class ConfigError(ValueError):
    """Raised when one or more configuration invariants are violated.

    ``violations`` holds ``(field_name, message)`` pairs, one per problem.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        text = "; ".join(f"{name}: {msg}" for name, msg in self.violations)
        super().__init__(f"invalid configuration: {text}")


def diffraction_limit(wavelength, numerical_aperture):
    """Smallest 1/e^2 spot radius of an ideal imaging system, 0.43 lambda/NA."""
    if not wavelength > 0:
        raise ValueError(f"wavelength must be positive, got {wavelength!r}")
    if not 0 < numerical_aperture < 1:
        raise ValueError(f"numerical aperture must lie in (0, 1), got {numerical_aperture!r}")
    return DIFFRACTION_FACTOR * wavelength / numerical_aperture


# ---------------------------------------------------------------------------
# configuration value objects
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IonSpecies:
    mass: float = YB174_ION_MASS_AMU * AMU  # kg
    wavelength: float = YB_WAVELENGTH  # m
    natural_linewidth: float = TWO_PI * YB_NATURAL_LINEWIDTH_HZ  # rad/s
    label: str = "174Yb+"

    @property
    def wavenumber(self):
        return TWO_PI / self.wavelength

    @property
    def recoil_velocity(self):
        return HBAR * self.wavenumber / self.mass

    def violations(self):
        out = []
        if not self.mass > 0:
            out.append(("ion.mass", "must be > 0"))
        if not self.wavelength > 0:
            out.append(("ion.wavelength", "must be > 0"))
        if not self.natural_linewidth > 0:
            out.append(("ion.natural_linewidth", "must be > 0"))
        return out


@dataclass(frozen=True)
class TrapConfig:
    nu_x: float = 1.0e6  # Hz, principal axis 1
    nu_y: float = 1.25e6  # Hz, principal axis 2
    nu_z: float = 1.0e6  # Hz, accepted but unused by the planar dynamics
    axis_rotation: float = 45.0  # deg, angle from the laser direction to principal axis 1
    rf_drive: float = 20.0e6  # Hz

    @property
    def secular(self):
        return np.array([self.nu_x, self.nu_y])

    @property
    def omega(self):
        return TWO_PI * self.secular

    def violations(self):
        out = []
        for name in ("nu_x", "nu_y", "nu_z"):
            nu = getattr(self, name)
            if not 0 < nu < self.rf_drive / 2:
                out.append((f"trap.{name}", f"must lie in (0, rf_drive/2), got {nu!r}"))
        if not -90.0 <= self.axis_rotation <= 90.0:
            out.append(("trap.axis_rotation", f"must lie in [-90, 90] deg, got {self.axis_rotation!r}"))
        if not self.rf_drive > 0:
            out.append(("trap.rf_drive", "must be > 0"))
        return out


def _default_direction():
    return (math.sqrt(0.5), math.sqrt(0.5))


@dataclass(frozen=True)
class LaserConfig:
    detuning: float = -0.5 * TWO_PI * YB_NATURAL_LINEWIDTH_HZ * math.sqrt(1.5)  # rad/s
    saturation: float = 0.5
    linewidth: float = 1.0e6  # Hz
    direction: tuple = field(default_factory=_default_direction)  # image-plane unit vector

    @property
    def direction_angle(self):
        """Beam direction in the image plane, degrees from the horizontal axis."""
        return math.degrees(math.atan2(self.direction[1], self.direction[0]))

    def violations(self):
        out = []
        if not self.saturation >= 0:
            out.append(("laser.saturation", f"must be >= 0, got {self.saturation!r}"))
        if not self.linewidth >= 0:
            out.append(("laser.linewidth", f"must be >= 0, got {self.linewidth!r}"))
        if not math.isfinite(self.detuning):
            out.append(("laser.detuning", "must be finite"))
        norm = math.hypot(*self.direction) if len(self.direction) == 2 else float("nan")
        if not abs(norm - 1.0) < 1e-9:
            out.append(("laser.direction", f"must be a unit 2-vector, got norm {norm!r}"))
        return out


@dataclass(frozen=True)
class ImagingConfig:
    numerical_aperture: float = 0.64
    magnification: float = 596.0
    psf_radius: float = 300e-9  # m, 1/e^2, object plane
    pixel_pitch: float = 13e-6 / 596.0  # m, object plane
    quantum_efficiency: float = 1.0
    read_noise: float = 0.0  # counts rms
    baseline_offset: float = 0.0  # counts
    width: int = 64
    height: int = 64
    n_photons: float = 1.0e5
    collection_efficiency: float = 0.045

    def violations(self):
        out = []
        if not 0 < self.numerical_aperture < 1:
            out.append(("imaging.numerical_aperture", "must lie in (0, 1)"))
        if not self.magnification > 0:
            out.append(("imaging.magnification", "must be > 0"))
        if not self.psf_radius >= 0:
            out.append(("imaging.psf_radius", "must be >= 0"))
        if not self.pixel_pitch > 0:
            out.append(("imaging.pixel_pitch", "must be > 0"))
        if not 0 <= self.quantum_efficiency <= 1:
            out.append(("imaging.quantum_efficiency", "must lie in [0, 1]"))
        if not self.read_noise >= 0:
            out.append(("imaging.read_noise", "must be >= 0"))
        if not self.baseline_offset >= 0:
            out.append(("imaging.baseline_offset", "must be >= 0"))
        for name in ("width", "height"):
            if not (int(getattr(self, name)) == getattr(self, name) and getattr(self, name) >= 4):
                out.append((f"imaging.{name}", "must be an integer >= 4"))
        if not self.n_photons > 0:
            out.append(("imaging.n_photons", "must be > 0"))
        if not 0 < self.collection_efficiency <= 1:
            out.append(("imaging.collection_efficiency", "must lie in (0, 1]"))
        return out


@dataclass(frozen=True)
class NoiseDriveConfig:
    force_psd: float = 0.0  # N^2/Hz, two-sided, white
    coupling: tuple = field(default_factory=_default_direction)  # principal-axis frame

    def violations(self):
        out = []
        if not self.force_psd >= 0:
            out.append(("noise.force_psd", f"must be >= 0, got {self.force_psd!r}"))
        norm = math.hypot(*self.coupling) if len(self.coupling) == 2 else float("nan")
        if not abs(norm - 1.0) < 1e-9:
            out.append(("noise.coupling", f"must be a unit 2-vector, got norm {norm!r}"))
        return out


@dataclass(frozen=True)
class SimulationConfig:
    steps_per_period: float = 50.0
    duration: float = 2.0e-3  # s
    transient_fraction: float = 0.2
    escape_bound: float = 50e-6  # m
    emission_factor: float = 0.5  # per-axis share of spontaneous-emission recoil variance
    recoil: str = "diffusion"  # or "events"
    n_blocks: int = 8
    ensemble: int = 16

    def violations(self):
        out = []
        if not self.steps_per_period >= 50:
            out.append(("dynamics.steps_per_period", "must be >= 50"))
        if not self.duration > 0:
            out.append(("dynamics.duration", "must be > 0"))
        if not 0 <= self.transient_fraction < 1:
            out.append(("dynamics.transient_fraction", "must lie in [0, 1)"))
        if not self.escape_bound > 0:
            out.append(("dynamics.escape_bound", "must be > 0"))
        if not 0 <= self.emission_factor <= 1:
            out.append(("dynamics.emission_factor", "must lie in [0, 1]"))
        if self.recoil not in ("diffusion", "events"):
            out.append(("dynamics.recoil", "must be 'diffusion' or 'events'"))
        if not self.n_blocks >= 2:
            out.append(("dynamics.n_blocks", "must be >= 2"))
        if not self.ensemble >= 1:
            out.append(("dynamics.ensemble", "must be >= 1"))
        return out


@dataclass(frozen=True)
class ThermometryConfig:
    w_lo: float = 249e-9  # m, diffraction bound
    w_hi: float = 373e-9  # m, smallest observed spot
    w_nominal: float = 300e-9  # m
    lorentz_min: float = 0.0  # Hz; 0 means derive it (smallest fitted width, or the power-broadened natural width)
    mode: str = "physical"

    def violations(self):
        out = []
        if not 0 < self.w_lo <= self.w_hi:
            out.append(("thermometry.w_lo", "need 0 < w_lo <= w_hi"))
        if not self.w_lo <= self.w_nominal <= self.w_hi:
            out.append(("thermometry.w_nominal", "must lie within [w_lo, w_hi]"))
        if not self.lorentz_min >= 0:
            out.append(("thermometry.lorentz_min", "must be >= 0"))
        if self.mode not in ("physical", "paper-literal"):
            out.append(("thermometry.mode", "must be 'physical' or 'paper-literal'"))
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    # heating levels as relative noise voltages; PSD scales with voltage squared
    noise_voltages: tuple = (0.0, 1.0, 3.3)
    noise_psd_ref: float = 1.2e-45  # N^2/Hz at unit relative voltage
    detuning_grid: tuple = tuple(-TWO_PI * 1e6 * f for f in (
        2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.5, 20.0, 25.0, 30.0, 40.0, 50.0, 60.0))  # rad/s
    relaxation_times: float = 100.0  # per-point duration in units of 1/cooling rate
    max_point_duration: float = 0.2  # s
    theta_grid: tuple = (45.0, 30.0, 20.0, 12.0, 8.0, 5.0, 3.0, 2.0, 1.0, 0.0, -1.0, -3.0, -8.0, -20.0)
    rotation_aspect: float = 2.25
    rotation_noise_psd: float = 6.0e-45  # N^2/Hz
    rotation_duration: float = 20e-3  # s
    scan_start: float = -TWO_PI * 90e6  # rad/s
    scan_stop: float = TWO_PI * 10e6  # rad/s
    scan_points: int = 51
    scan_dwell: float = 1e-3  # s, several cooling times: the ion follows the sweep
    image_width: int = 192
    image_height: int = 192

    def violations(self):
        out = []
        if len(self.noise_voltages) < 2 or any(v < 0 for v in self.noise_voltages):
            out.append(("experiment.noise_voltages", "need >= 2 non-negative levels"))
        if not self.noise_psd_ref >= 0:
            out.append(("experiment.noise_psd_ref", "must be >= 0"))
        for name in ("detuning_grid", "theta_grid", "noise_voltages"):
            grid = np.asarray(getattr(self, name), dtype=float)
            d = np.diff(grid)
            if grid.size > 1 and not (np.all(d > 0) or np.all(d < 0)):
                out.append((f"experiment.{name}", "must be strictly monotone"))
        if any(d >= 0 for d in self.detuning_grid):
            out.append(("experiment.detuning_grid", "all detunings must be red (negative)"))
        if any(abs(t) > 90 for t in self.theta_grid):
            out.append(("experiment.theta_grid", "angles must lie in [-90, 90]"))
        if not self.rotation_aspect > 0:
            out.append(("experiment.rotation_aspect", "must be > 0"))
        if not self.scan_points >= 8:
            out.append(("experiment.scan_points", "must be >= 8"))
        if not self.scan_stop > self.scan_start:
            out.append(("experiment.scan_stop", "must exceed scan_start"))
        if not self.scan_dwell > 0:
            out.append(("experiment.scan_dwell", "must be > 0"))
        if not (self.relaxation_times > 0 and self.max_point_duration > 0 and self.rotation_duration > 0):
            out.append(("experiment.relaxation_times", "durations must be > 0"))
        if not (self.image_width >= 8 and self.image_height >= 8):
            out.append(("experiment.image_width_px", "frames must be at least 8x8"))
        return out


@dataclass(frozen=True)
class Config:
    ion: IonSpecies = field(default_factory=IonSpecies)
    trap: TrapConfig = field(default_factory=TrapConfig)
    laser: LaserConfig = field(default_factory=LaserConfig)
    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    noise: NoiseDriveConfig = field(default_factory=NoiseDriveConfig)
    sim: SimulationConfig = field(default_factory=SimulationConfig)
    thermometry: ThermometryConfig = field(default_factory=ThermometryConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def with_(self, **sections):
        """Return a copy with whole sections, or fields inside them, replaced.

        ``cfg.with_(laser={"saturation": 1.0})`` replaces one field;
        ``cfg.with_(laser=LaserConfig(...))`` replaces the section.
        """
        updates = {}
        for name, value in sections.items():
            if isinstance(value, dict):
                updates[name] = replace(getattr(self, name), **value)
            else:
                updates[name] = value
        return replace(self, **updates)


def validate_config(bundle):
    """Check every invariant of every section; return the bundle unchanged.

    Raises ConfigError listing all violations, not just the first one.
    """
    problems = []
    for f in fields(bundle):
        section = getattr(bundle, f.name)
        problems.extend(section.violations())
    if problems:
        raise ConfigError(problems)
    return bundle


# ---------------------------------------------------------------------------
# flat dotted-key configuration files
# ---------------------------------------------------------------------------

_MHZ_ANG = TWO_PI * 1e6

# key -> (section, field, scale) ; stored value = file value * scale
_KEYS = {
    "ion.label": ("ion", "label", None),
    "ion.mass_amu": ("ion", "mass", AMU),
    "ion.wavelength_nm": ("ion", "wavelength", 1e-9),
    "ion.linewidth_mhz": ("ion", "natural_linewidth", _MHZ_ANG),
    "trap.nu_x_hz": ("trap", "nu_x", 1.0),
    "trap.nu_y_hz": ("trap", "nu_y", 1.0),
    "trap.nu_z_hz": ("trap", "nu_z", 1.0),
    "trap.axis_rotation_deg": ("trap", "axis_rotation", 1.0),
    "trap.rf_drive_hz": ("trap", "rf_drive", 1.0),
    "laser.detuning_mhz": ("laser", "detuning", _MHZ_ANG),
    "laser.saturation": ("laser", "saturation", 1.0),
    "laser.linewidth_hz": ("laser", "linewidth", 1.0),
    "laser.direction_deg": ("laser", "direction", "angle"),
    "imaging.numerical_aperture": ("imaging", "numerical_aperture", 1.0),
    "imaging.magnification": ("imaging", "magnification", 1.0),
    "imaging.psf_radius_nm": ("imaging", "psf_radius", 1e-9),
    "imaging.pixel_pitch_nm": ("imaging", "pixel_pitch", 1e-9),
    "imaging.quantum_efficiency": ("imaging", "quantum_efficiency", 1.0),
    "imaging.read_noise": ("imaging", "read_noise", 1.0),
    "imaging.baseline_offset": ("imaging", "baseline_offset", 1.0),
    "imaging.width_px": ("imaging", "width", "int"),
    "imaging.height_px": ("imaging", "height", "int"),
    "imaging.n_photons": ("imaging", "n_photons", 1.0),
    "imaging.collection_efficiency": ("imaging", "collection_efficiency", 1.0),
    "noise.force_psd": ("noise", "force_psd", 1.0),
    "noise.coupling_deg": ("noise", "coupling", "angle"),
    "dynamics.steps_per_period": ("sim", "steps_per_period", 1.0),
    "dynamics.duration_s": ("sim", "duration", 1.0),
    "dynamics.transient_fraction": ("sim", "transient_fraction", 1.0),
    "dynamics.escape_bound_um": ("sim", "escape_bound", 1e-6),
    "dynamics.emission_factor": ("sim", "emission_factor", 1.0),
    "dynamics.recoil": ("sim", "recoil", None),
    "dynamics.n_blocks": ("sim", "n_blocks", "int"),
    "dynamics.ensemble": ("sim", "ensemble", "int"),
    "thermometry.w_lo_nm": ("thermometry", "w_lo", 1e-9),
    "thermometry.w_hi_nm": ("thermometry", "w_hi", 1e-9),
    "thermometry.w_nominal_nm": ("thermometry", "w_nominal", 1e-9),
    "thermometry.lorentz_min_mhz": ("thermometry", "lorentz_min", 1e6),
    "thermometry.mode": ("thermometry", "mode", None),
    "experiment.noise_voltages": ("experiment", "noise_voltages", "tuple"),
    "experiment.noise_psd_ref": ("experiment", "noise_psd_ref", 1.0),
    "experiment.detuning_grid_mhz": ("experiment", "detuning_grid", ("tuple", _MHZ_ANG)),
    "experiment.relaxation_times": ("experiment", "relaxation_times", 1.0),
    "experiment.max_point_duration_s": ("experiment", "max_point_duration", 1.0),
    "experiment.theta_grid_deg": ("experiment", "theta_grid", "tuple"),
    "experiment.rotation_aspect": ("experiment", "rotation_aspect", 1.0),
    "experiment.rotation_noise_psd": ("experiment", "rotation_noise_psd", 1.0),
    "experiment.rotation_duration_s": ("experiment", "rotation_duration", 1.0),
    "experiment.scan_start_mhz": ("experiment", "scan_start", _MHZ_ANG),
    "experiment.scan_stop_mhz": ("experiment", "scan_stop", _MHZ_ANG),
    "experiment.scan_points": ("experiment", "scan_points", "int"),
    "experiment.scan_dwell_s": ("experiment", "scan_dwell", 1.0),
    "experiment.image_width_px": ("experiment", "image_width", "int"),
    "experiment.image_height_px": ("experiment", "image_height", "int"),
}


def _convert(key, raw, scale):
    if scale is None:
        if not isinstance(raw, str):
            raise ConfigError([(key, f"expected text, got {raw!r}")])
        return raw
    if scale == "int":
        if isinstance(raw, bool) or not isinstance(raw, (int, float)) or int(raw) != raw:
            raise ConfigError([(key, f"expected an integer, got {raw!r}")])
        return int(raw)
    if scale == "angle":
        a = math.radians(float(raw))
        return (math.cos(a), math.sin(a))
    if scale == "tuple" or isinstance(scale, tuple):
        factor = scale[1] if isinstance(scale, tuple) else 1.0
        if not isinstance(raw, (list, tuple)):
            raise ConfigError([(key, f"expected a list, got {raw!r}")])
        return tuple(float(v) * factor for v in raw)
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ConfigError([(key, f"expected a number, got {raw!r}")])
    return float(raw) * scale


def parse_config_text(text, base=None):
    """Parse ``key = value`` lines into a Config.

    Values are Python/TOML-style literals: numbers, quoted strings, lists.
    ``#`` starts a comment. Unknown or repeated keys are errors.
    """
    base = base or Config()
    updates = {}
    seen = set()
    problems = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            problems.append((f"line {lineno}", f"expected 'key = value', got {line.strip()!r}"))
            continue
        key, _, value = (s.strip() for s in stripped.partition("="))
        if key not in _KEYS:
            problems.append((key, "unknown key"))
            continue
        if key in seen:
            problems.append((key, "repeated key"))
            continue
        seen.add(key)
        try:
            raw = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            problems.append((key, f"cannot parse value {value!r}"))
            continue
        section, name, scale = _KEYS[key]
        try:
            updates.setdefault(section, {})[name] = _convert(key, raw, scale)
        except ConfigError as exc:
            problems.extend(exc.violations)
    if problems:
        raise ConfigError(problems)
    return base.with_(**updates)


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError([("config", f"file not found: {path}")])
    return validate_config(parse_config_text(path.read_text()))


def format_config(cfg):
    """Render a Config back into the flat key format (round-trips through the parser)."""
    lines = []
    for key, (section, name, scale) in _KEYS.items():
        value = getattr(getattr(cfg, section), name)
        if scale is None:
            text = repr(value)
        elif scale == "int":
            text = str(int(value))
        elif scale == "angle":
            text = repr(math.degrees(math.atan2(value[1], value[0])))
        elif scale == "tuple" or isinstance(scale, tuple):
            factor = scale[1] if isinstance(scale, tuple) else 1.0
            text = "[" + ", ".join(repr(v / factor) for v in value) + "]"
        else:
            text = repr(value / scale)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def config_keys():
    return tuple(_KEYS)


def as_dict(section) -> dict[str, Any]:
    return {f.name: getattr(section, f.name) for f in fields(section)}
