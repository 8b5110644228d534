import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.special import voigt_profile
from scipy.optimize import brentq

from iontherm.dynamics import thermal_spectrum
from iontherm.fitters import SpectrumScan, fit_spectrum
from iontherm.imaging import expected_spot_radius, render_image
from iontherm.physcore import KB, TWO_PI, Config, ImagingConfig, TrapConfig
from iontherm.thermometry import (LITERAL, PHYSICAL, ResolutionBounds, ThermometryResult, axis_temperature,
                                  check_bounds_order, doppler_temperature, natural_linewidth_hz,
                                  power_broadened_linewidth_hz, spatial_thermometry, spectroscopic_band,
                                  spectroscopic_thermometry, temperature_from_variance, thermal_doppler_fwhm,
                                  variance_deconvolve, voigt_decompose, voigt_fwhm, write_results_csv)

BOUNDS = ResolutionBounds(249e-9, 373e-9)

# ---------------------------------------------------------------------------
# spatial
# ---------------------------------------------------------------------------


def test_deconvolve_values():
    assert variance_deconvolve(373e-9, 373e-9) == (0.0, True)
    assert variance_deconvolve(300e-9, 400e-9) == (0.0, True)
    v, c = variance_deconvolve(500e-9, 300e-9)
    assert not c and v == pytest.approx((500e-9**2 - 300e-9**2) / 4)
    with pytest.raises(ValueError):
        variance_deconvolve(0.0, 1e-7)


def test_equipartition_oracle(ion):
    # physical mode is equipartition: (1/2) m w^2 <x^2> = (1/2) kB T
    nu, T = 1e6, 0.05
    x2 = KB * T / (ion.mass * (TWO_PI * nu) ** 2)
    assert temperature_from_variance(x2, nu, ion) == pytest.approx(T, rel=1e-12)
    assert temperature_from_variance(x2, nu, ion, LITERAL) == pytest.approx(T / 4, rel=1e-12)


@given(st.floats(1e-18, 1e-12), st.floats(1e5, 5e6))
def test_spatial_mode_ratio(x2, nu):
    from iontherm.physcore import IonSpecies
    ion = IonSpecies()
    ratio = temperature_from_variance(x2, nu, ion, LITERAL) / temperature_from_variance(x2, nu, ion)
    assert ratio == pytest.approx(0.25, rel=1e-14)


def test_unknown_mode(ion):
    with pytest.raises(ValueError):
        temperature_from_variance(1e-14, 1e6, ion, "other")


def test_bounds_validated():
    with pytest.raises(ValueError):
        ResolutionBounds(400e-9, 300e-9)
    with pytest.raises(ValueError):
        ResolutionBounds(0.0, 300e-9)


@settings(max_examples=60)
@given(st.floats(200e-9, 1.5e-6), st.floats(0.0, 50e-9), st.floats(249e-9, 373e-9))
def test_band_ordering(w, w_err, w_i):
    from iontherm.physcore import IonSpecies
    T, stat, lo, hi, flags = axis_temperature(w, w_err, 1e6, IonSpecies(), BOUNDS, w_i)
    assert 0.0 <= lo <= T <= hi
    assert stat >= 0.0
    assert ("clamped" in flags) == (w <= w_i)


def test_axis_temperature_rejects_nominal_outside(ion):
    with pytest.raises(ValueError):
        axis_temperature(400e-9, 1e-9, 1e6, ion, BOUNDS, 200e-9)


def test_stat_error_is_linear_propagation(ion):
    w, dw = 450e-9, 1e-12
    T0 = axis_temperature(w, 0.0, 1e6, ion, BOUNDS, 300e-9)[0]
    T1 = axis_temperature(w + dw, 0.0, 1e6, ion, BOUNDS, 300e-9)[0]
    stat = axis_temperature(w, dw, 1e6, ion, BOUNDS, 300e-9)[1]
    assert stat == pytest.approx(T1 - T0, rel=1e-5)


def test_spatial_round_trip_noiseless(ion):
    trap = TrapConfig(nu_x=1e6, nu_y=1.25e6)
    im = ImagingConfig(width=128, height=128)
    T = 0.02
    sx = math.sqrt(KB * T / ion.mass) / (TWO_PI * trap.nu_x)
    sy = math.sqrt(KB * T / ion.mass) / (TWO_PI * trap.nu_y)
    img = render_image(sx, sy, 0.0, im, 1e5, noise=False)
    res = spatial_thermometry(img, trap, ion, BOUNDS, im.psf_radius)
    assert [r.axis for r in res] == ["1", "2"]
    for r in res:
        assert r.T == pytest.approx(T, rel=1e-6)
        assert r.sys_lo <= r.T <= r.sys_hi


def test_spatial_axis_assignment_follows_angle(ion):
    trap = TrapConfig(nu_x=1e6, nu_y=1e6)
    im = ImagingConfig()
    img = render_image(40e-9, 120e-9, 0.0, im, 1e5, noise=False)  # wide along image y
    a = spatial_thermometry(img, trap, ion, BOUNDS, 300e-9, fit_rotation=True, axis_angle=0.0)
    b = spatial_thermometry(img, trap, ion, BOUNDS, 300e-9, fit_rotation=True, axis_angle=90.0)
    assert a[1].T > a[0].T
    assert b[0].T > b[1].T


def test_spatial_truncated_image(ion):
    img = render_image(100e-9, 100e-9, 0.0, ImagingConfig(), 1e4, noise=False, center=(0.0, 0.0))
    res = spatial_thermometry(img, TrapConfig(), ion, BOUNDS, 300e-9)
    assert all(math.isnan(r.T) and "truncated" in r.flags for r in res)


def test_results_csv_refuses_mixed_modes(tmp_path):
    a = ThermometryResult(1.0, 0.1, 0.5, 1.5, "1", "spatial", PHYSICAL)
    b = ThermometryResult(1.0, 0.1, 0.5, 1.5, "1", "spatial", LITERAL)
    with pytest.raises(ValueError):
        write_results_csv([a, b], tmp_path / "x.csv")
    write_results_csv([a], tmp_path / "y.csv")
    assert (tmp_path / "y.csv").read_text().splitlines()[0] == "method,axis,mode,T_K,stat_err_K,sys_lo_K,sys_hi_K,flags"
    assert check_bounds_order([a, b])


# ---------------------------------------------------------------------------
# Voigt
# ---------------------------------------------------------------------------

def _voigt_fwhm_oracle(gg, gl):
    sigma, gamma = gg / (2 * math.sqrt(2 * math.log(2))), gl / 2
    peak = voigt_profile(0.0, sigma, gamma)
    half = brentq(lambda x: voigt_profile(x, sigma, gamma) - peak / 2, 0.0, 10 * (gg + gl), xtol=1e-14 * (gg + gl))
    return 2 * half


@pytest.mark.parametrize("ratio", np.geomspace(0.05, 20, 9))
def test_voigt_fwhm_against_faddeeva_oracle(ratio):
    gg = 10.0
    assert voigt_fwhm(gg, ratio * gg) == pytest.approx(_voigt_fwhm_oracle(gg, ratio * gg), rel=3e-4)


def test_voigt_limits():
    assert voigt_fwhm(7.0, 0.0) == pytest.approx(7.0, rel=1e-15)
    assert voigt_fwhm(0.0, 7.0) == pytest.approx(7.0 * (0.5346 + math.sqrt(0.2166)), rel=1e-15)
    # worked by hand: 5.346 + sqrt(121.66) = 5.346 + 11.02996 = 16.37596
    assert voigt_fwhm(10.0, 10.0) == pytest.approx(16.37596, abs=1e-5)
    with pytest.raises(ValueError):
        voigt_fwhm(0.0, 0.0)


@given(st.floats(1e4, 1e9), st.floats(1e4, 1e9))
def test_voigt_round_trip(gg, gl):
    back = voigt_decompose(voigt_fwhm(gg, gl), gl)
    assert not back.clamped
    assert back.value == pytest.approx(gg, rel=1e-9)


@given(st.floats(1e6, 1e8), st.floats(0.1, 1.0))
def test_voigt_decompose_clamps(gl, f):
    assert voigt_decompose(f * voigt_fwhm(0.0, gl), gl) == (0.0, True)


# ---------------------------------------------------------------------------
# Doppler
# ---------------------------------------------------------------------------

def test_doppler_against_maxwell_boltzmann_sample(ion, rng):
    # Doppler shift v/lambda of Maxwell-Boltzmann velocities; FWHM = 2 sqrt(2 ln2) * sample std
    T = 0.03
    v = rng.normal(0.0, math.sqrt(KB * T / ion.mass), 400000)
    fwhm = 2 * math.sqrt(2 * math.log(2)) * np.std(v / ion.wavelength)
    assert doppler_temperature(fwhm, ion) == pytest.approx(T, rel=0.01)
    assert thermal_doppler_fwhm(T, ion) == pytest.approx(fwhm, rel=0.005)


def test_doppler_histogram_half_max(ion, rng):
    T = 0.1
    shift = rng.normal(0.0, math.sqrt(KB * T / ion.mass), 2_000_000) / ion.wavelength
    hist, edges = np.histogram(shift, bins=201, range=(-4 * shift.std(), 4 * shift.std()))
    centres = 0.5 * (edges[1:] + edges[:-1])
    half = hist[98:103].mean() / 2  # peak from the central bins, not a single noisy one
    i = np.nonzero(hist >= half)[0]
    lo, hi = i.min(), i.max()
    left = np.interp(half, [hist[lo - 1], hist[lo]], [centres[lo - 1], centres[lo]])
    right = np.interp(half, [hist[hi + 1], hist[hi]], [centres[hi + 1], centres[hi]])
    fwhm = right - left
    assert doppler_temperature(fwhm, ion) == pytest.approx(T, rel=0.03)


@given(st.floats(1e5, 1e9))
def test_doppler_mode_ratio(g):
    from iontherm.physcore import IonSpecies
    ion = IonSpecies()
    ratio = doppler_temperature(g, ion, LITERAL) / doppler_temperature(g, ion)
    assert ratio == pytest.approx(4 * math.log(2), rel=1e-12)


@settings(max_examples=50)
@given(st.floats(20e6, 200e6), st.floats(0.0, 2e6), st.floats(19.6e6, 30e6))
def test_spectroscopic_band_ordering(gt, err, gl_min):
    from iontherm.physcore import IonSpecies
    T, stat, lo, hi, flags = spectroscopic_band(gt, err, IonSpecies(), 19.6e6, gl_min)
    assert 0 <= lo <= T <= hi
    assert stat >= 0


def test_spectroscopic_band_rejects_order(ion):
    with pytest.raises(ValueError):
        spectroscopic_band(30e6, 1e6, ion, 25e6, 20e6)


@pytest.mark.parametrize("T", [0.002, 0.02, 0.1, 0.3])
def test_static_thermal_scan_band_contains_truth(T, ion):
    cfg = Config()
    nu = np.linspace(-90e6, 10e6, 51)
    rate = thermal_spectrum(TWO_PI * nu, T, cfg.laser, ion) * (0.5 + np.arctan(-nu / 1e6) / np.pi)
    scan = SpectrumScan(nu, rate, 1e-3)
    fit = fit_spectrum(scan, laser_linewidth=1e6, fix_linewidth=True)
    band = spectroscopic_thermometry(scan, ion, natural_linewidth_hz(ion),
                                     power_broadened_linewidth_hz(ion, cfg.laser.saturation), fit=fit)
    assert band.sys_lo <= T <= band.sys_hi
    assert band.method == "spectroscopic" and band.axis == "line"
