"""
Temperature extraction from ion images (spatial) and fluorescence spectra
(spectroscopic), each with a statistical error and a systematic band.

Two formula conventions are available. ``physical`` (default) uses
equipartition, k_B T = m (2 pi nu)^2 <x^2>, and the Gaussian-FWHM Doppler
relation T = m lambda^2 G^2 / (8 ln2 k_B). ``paper-literal`` uses
k_B T = m pi^2 nu^2 <x^2> and T = (m / 2 k_B)(G lambda)^2. The two differ by
exactly 4 and 4 ln2 respectively.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .fitters import fit_ion_image, fit_spectrum
from .physcore import KB, TWO_PI, IonSpecies

PHYSICAL = "physical"
LITERAL = "paper-literal"
MODES = (PHYSICAL, LITERAL)

OL_A = 0.5346  # Olivero-Longbothum coefficients
OL_B = 0.2166

CSV_HEADER = ["method", "axis", "mode", "T_K", "stat_err_K", "sys_lo_K", "sys_hi_K", "flags"]


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


class Deconvolved(NamedTuple):
    value: float
    clamped: bool


@dataclass(frozen=True)
class ResolutionBounds:
    w_lo: float  # m, diffraction-limited PSF radius
    w_hi: float  # m, smallest observed spot radius

    def __post_init__(self):
        if not (0 < self.w_lo <= self.w_hi):
            raise ValueError(f"need 0 < w_lo <= w_hi, got ({self.w_lo!r}, {self.w_hi!r})")


@dataclass
class ThermometryResult:
    T: float
    stat_err: float
    sys_lo: float
    sys_hi: float
    axis: str
    method: str
    mode: str = PHYSICAL
    flags: tuple = ()
    details: dict = field(default_factory=dict)

    def row(self):
        return [self.method, self.axis, self.mode, f"{self.T:.9e}", f"{self.stat_err:.9e}",
                f"{self.sys_lo:.9e}", f"{self.sys_hi:.9e}", ";".join(self.flags)]

    def to_text(self):
        lines = [f"{k} {v}" for k, v in zip(CSV_HEADER, self.row())]
        lines += [f"{k} {v:.9e}" if isinstance(v, float) else f"{k} {v}" for k, v in self.details.items()]
        return "\n".join(lines)


def write_results_csv(results, path):
    """Write ThermometryResult rows; all rows must share one mode."""
    modes = {r.mode for r in results}
    if len(modes) > 1:
        raise ValueError(f"refusing to mix modes {sorted(modes)} in one file")
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(CSV_HEADER)
        for r in results:
            out.writerow(r.row())


# ---------------------------------------------------------------------------
# spatial
# ---------------------------------------------------------------------------

def variance_deconvolve(w_obs, w_i):
    """Thermal position variance (m^2) from an observed 1/e^2 radius and the PSF radius.

    Clamped to zero, with the flag set, when the PSF is at least as wide as the spot.
    """
    if not w_obs > 0 or w_i < 0:
        raise ValueError("need w_obs > 0 and w_i >= 0")
    if w_i >= w_obs:
        return Deconvolved(0.0, True)
    return Deconvolved((w_obs * w_obs - w_i * w_i) / 4.0, False)


def _spatial_factor(nu, ion, mode):
    _check_mode(mode)
    if mode == PHYSICAL:
        return ion.mass * (TWO_PI * nu) ** 2 / KB
    # (pi nu)^2 is exactly a quarter of (2 pi nu)^2 in floating point
    return ion.mass * (math.pi * nu) ** 2 / KB


def temperature_from_variance(x2, nu, ion, mode=PHYSICAL):
    """Temperature (K) of a harmonically bound ion with position variance ``x2``."""
    if x2 < 0 or not nu > 0:
        raise ValueError("need <x^2> >= 0 and nu > 0")
    return _spatial_factor(nu, ion, mode) * x2


def _wrap90(a):
    return (a + 90.0) % 180.0 - 90.0


def axis_temperature(w, w_err, nu, ion, bounds, w_i_nominal, mode=PHYSICAL):
    """Temperature, propagated error and systematic band for one fitted radius."""
    if not bounds.w_lo <= w_i_nominal <= bounds.w_hi:
        raise ValueError("nominal PSF radius must lie inside the resolution bounds")
    k = _spatial_factor(nu, ion, mode)
    x2, clamped = variance_deconvolve(w, w_i_nominal)
    x2_lo, clamped_lo = variance_deconvolve(w, bounds.w_hi)
    x2_hi, clamped_hi = variance_deconvolve(w, bounds.w_lo)
    T = k * x2
    # dT/dw = k w / 2; at the clamp the same slope is reported at the boundary
    stat = k * w * w_err / 2.0
    flags = []
    if clamped:
        flags.append("clamped")
    if clamped_lo:
        flags.append("clamped_lo")
    if clamped_hi:
        flags.append("clamped_hi")
    if clamped or stat > T:
        flags.append("near_boundary")
    return T, stat, k * x2_lo, k * x2_hi, flags


def spatial_thermometry(image, trap, ion, bounds, w_i_nominal, mode=PHYSICAL, fit_rotation=False,
                        axis_angle=0.0, fit=None):
    """Per-principal-axis temperatures from an ion image.

    ``axis_angle`` is the image-plane angle (deg) of principal axis 1. The
    fitted radius whose direction lies within 45 deg of it is assigned to
    axis 1. Axes of a truncated image are reported as NaN with the
    ``truncated`` flag. Pass ``fit`` to reuse an existing image fit.
    """
    _check_mode(mode)
    if image.truncated and fit is None:
        nan = float("nan")
        return [ThermometryResult(nan, nan, nan, nan, str(a + 1), "spatial", mode, ("truncated",),
                                  {"on_chip_fraction": float(image.on_chip_fraction)}) for a in range(2)]
    if fit is None:
        fit = fit_ion_image(image, fit_rotation=fit_rotation)
    p, e = fit.params, fit.errors
    phi = p[5] if fit_rotation else 0.0
    swap = abs(_wrap90(phi - axis_angle)) > 45.0
    order = (4, 3) if swap else (3, 4)
    nus = (trap.nu_x, trap.nu_y)
    out = []
    for a, idx in enumerate(order):
        w, w_err = float(p[idx]), float(e[idx])
        T, stat, lo, hi, flags = axis_temperature(w, w_err, nus[a], ion, bounds, w_i_nominal, mode)
        if not fit.converged:
            flags.append("unconverged")
        if image.truncated:
            flags.append("truncated")
            T = stat = lo = hi = float("nan")
        details = {"w_obs_m": w, "w_err_m": w_err, "w_i_m": float(w_i_nominal), "nu_hz": float(nus[a])}
        out.append(ThermometryResult(T, stat, lo, hi, str(a + 1), "spatial", mode, tuple(flags), details))
    return out


# ---------------------------------------------------------------------------
# spectroscopic
# ---------------------------------------------------------------------------

def voigt_fwhm(gamma_g, gamma_l):
    """Olivero-Longbothum Voigt FWHM from Gaussian and Lorentzian FWHMs (same units)."""
    if gamma_g < 0 or gamma_l < 0 or (gamma_g == 0 and gamma_l == 0):
        raise ValueError("need non-negative widths, not both zero")
    return OL_A * gamma_l + math.sqrt(OL_B * gamma_l**2 + gamma_g**2)


def voigt_decompose(gamma_t, gamma_l):
    """Gaussian FWHM that combines with ``gamma_l`` into total FWHM ``gamma_t``.

    Exact inverse of voigt_fwhm; clamped to zero with the flag set when
    ``gamma_t`` does not exceed the pure-Lorentzian width.
    """
    if not gamma_t > 0 or gamma_l < 0:
        raise ValueError("need gamma_t > 0 and gamma_l >= 0")
    if gamma_l > 0 and gamma_t <= voigt_fwhm(0.0, gamma_l):
        return Deconvolved(0.0, True)
    rad = (gamma_t - OL_A * gamma_l) ** 2 - OL_B * gamma_l**2
    if rad <= 0:
        return Deconvolved(0.0, True)
    return Deconvolved(math.sqrt(rad), False)


def _doppler_factor(ion, mode):
    _check_mode(mode)
    if mode == PHYSICAL:
        return ion.mass * ion.wavelength**2 / (8.0 * math.log(2.0) * KB)
    return ion.mass * ion.wavelength**2 / (2.0 * KB)


def doppler_temperature(gamma_g, ion, mode=PHYSICAL):
    """Temperature (K) from a Doppler (Gaussian) FWHM in Hz."""
    if gamma_g < 0:
        raise ValueError("gamma_g must be non-negative")
    return _doppler_factor(ion, mode) * gamma_g**2


def spectroscopic_band(gamma_t, gamma_t_err, ion, gamma_l_natural, gamma_l_min_observed, mode=PHYSICAL):
    """Temperature band from a total linewidth and the two Lorentzian-width assumptions."""
    if gamma_l_natural > gamma_l_min_observed:
        raise ValueError("natural linewidth must not exceed the smallest observed linewidth")
    k = _doppler_factor(ion, mode)
    g_hi, c_hi = voigt_decompose(gamma_t, gamma_l_natural)
    g_lo, c_lo = voigt_decompose(gamma_t, gamma_l_min_observed)
    hi = k * g_hi**2
    lo = k * g_lo**2
    # d(G^2)/dGamma_T = 2 (Gamma_T - a Gamma_L) off the clamp, 0 on it
    d_hi = 0.0 if c_hi else 2.0 * k * (gamma_t - OL_A * gamma_l_natural)
    d_lo = 0.0 if c_lo else 2.0 * k * (gamma_t - OL_A * gamma_l_min_observed)
    T = 0.5 * (lo + hi)
    stat = 0.5 * abs(d_hi + d_lo) * gamma_t_err
    flags = []
    if c_lo:
        flags.append("clamped_lo")
    if c_hi:
        flags.append("clamped_hi")
    if c_lo and c_hi:
        flags.append("clamped")
    return T, stat, lo, hi, flags


def spectroscopic_thermometry(scan, ion, gamma_l_natural, gamma_l_min_observed, mode=PHYSICAL,
                              laser_linewidth=None, fit=None):
    """Doppler temperature band from a fluorescence scan.

    The fitted total width is decomposed assuming the Lorentzian part is the
    natural linewidth (upper bound) or the smallest observed linewidth (lower
    bound); T is the band midpoint. Widths in Hz.
    """
    _check_mode(mode)
    if fit is None:
        fit = fit_spectrum(scan, laser_linewidth=laser_linewidth)
    gt, gt_err = float(fit.params[2]), float(fit.errors[2])
    T, stat, lo, hi, flags = spectroscopic_band(gt, gt_err, ion, gamma_l_natural, gamma_l_min_observed, mode)
    if not fit.converged:
        flags.append("unconverged")
    details = {"gamma_t_hz": gt, "gamma_t_err_hz": gt_err, "gamma_l_natural_hz": float(gamma_l_natural),
               "gamma_l_min_observed_hz": float(gamma_l_min_observed)}
    return ThermometryResult(T, stat, lo, hi, "line", "spectroscopic", mode, tuple(flags), details)


def natural_linewidth_hz(ion: IonSpecies):
    return ion.natural_linewidth / TWO_PI


def power_broadened_linewidth_hz(ion: IonSpecies, saturation):
    return natural_linewidth_hz(ion) * math.sqrt(1.0 + saturation)


def thermal_doppler_fwhm(T, ion: IonSpecies):
    """Gaussian FWHM (Hz) of the Doppler profile of a thermal ion; the inverse of the physical formula."""
    return math.sqrt(8.0 * math.log(2.0) * KB * T / ion.mass) / ion.wavelength


def check_bounds_order(results):
    """True when every finite result satisfies sys_lo <= T <= sys_hi."""
    return all(not np.isfinite(r.T) or (r.sys_lo <= r.T * (1 + 1e-12) and r.T <= r.sys_hi * (1 + 1e-12))
               for r in results)
