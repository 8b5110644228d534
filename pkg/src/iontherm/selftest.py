"""
Fast invariant checks run by ``iontherm selftest``.

Each check returns (name, ok, detail). Everything here runs in a few
seconds and needs no files.
"""
from __future__ import annotations

import math

import numpy as np

from . import dynamics, fitters, imaging, physcore, thermometry


def _fd_jacobian(f, p, h_rel=1e-6):
    p = np.asarray(p, dtype=float)
    cols = []
    for j in range(p.size):
        h = h_rel * max(abs(p[j]), 1.0)
        up, dn = p.copy(), p.copy()
        up[j] += h
        dn[j] -= h
        cols.append((f(up) - f(dn)) / (2 * h))
    return np.stack(cols, axis=-1)


def check_diffraction_monotone():
    na = np.linspace(0.1, 0.95, 50)
    w = [physcore.diffraction_limit(369.5e-9, a) for a in na]
    lam = np.linspace(200e-9, 900e-9, 50)
    w2 = [physcore.diffraction_limit(x, 0.64) for x in lam]
    ok = np.all(np.diff(w) < 0) and np.all(np.diff(w2) > 0)
    return "diffraction limit monotone in NA and wavelength", bool(ok), ""


def check_validate_idempotent():
    cfg = physcore.Config()
    once = physcore.validate_config(cfg)
    twice = physcore.validate_config(once)
    return "config validation idempotent", once == twice == cfg, ""


def check_gauss2d_jacobian():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(10):
        p = np.array([rng.uniform(1, 100), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 3),
                      rng.uniform(0.5, 3), rng.uniform(-80, 80), rng.uniform(0, 10)])
        x, y = rng.uniform(-2, 2, 30), rng.uniform(-2, 2, 30)
        _, J = fitters.gauss2d_model(p, x, y)
        Jn = _fd_jacobian(lambda q: fitters.gauss2d_model(q, x, y)[0], p)
        worst = max(worst, np.max(np.abs(J - Jn)) / np.max(np.abs(Jn)))
    return "2D Gaussian Jacobian vs finite differences", worst < 1e-5, f"max rel err {worst:.2e}"


def check_spectrum_jacobian():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(10):
        p = np.array([rng.uniform(10, 1000), rng.uniform(-5, 5), rng.uniform(5, 40), rng.uniform(0.5, 5),
                      rng.uniform(0, 2)])
        nu = rng.uniform(-60, 20, 40)
        _, J = fitters.spectrum_model(p, nu)
        Jn = _fd_jacobian(lambda q: fitters.spectrum_model(q, nu)[0], p)
        worst = max(worst, np.max(np.abs(J - Jn) / (np.abs(Jn).max(axis=0) + 1e-300)))
    return "spectrum Jacobian vs finite differences", worst < 1e-5, f"max rel err {worst:.2e}"


def check_voigt_round_trip():
    worst = 0.0
    for gl in np.geomspace(1e6, 1e8, 9):
        for gg in np.geomspace(1e6, 1e8, 9):
            back = thermometry.voigt_decompose(thermometry.voigt_fwhm(gg, gl), gl).value
            worst = max(worst, abs(back - gg) / gg)
    return "Voigt decomposition inverts the FWHM formula", worst < 1e-10, f"max rel err {worst:.1e}"


def check_mode_ratios():
    ion = physcore.IonSpecies()
    s = (thermometry.temperature_from_variance(1e-14, 7e5, ion, thermometry.LITERAL)
         / thermometry.temperature_from_variance(1e-14, 7e5, ion))
    d = (thermometry.doppler_temperature(2e7, ion, thermometry.LITERAL)
         / thermometry.doppler_temperature(2e7, ion))
    ok = abs(s - 0.25) < 1e-12 and abs(d - 4 * math.log(2)) < 1e-9
    return "formula-mode ratios", ok, f"spatial {s:.6f}, Doppler {d:.6f}"


def check_flux_and_radius():
    cfg = physcore.ImagingConfig()
    img = imaging.render_image(100e-9, 100e-9, 0.0, cfg, 1e5, noise=False)
    flux = (img.counts - cfg.baseline_offset).sum() / 1e5
    fit = fitters.fit_ion_image(img)
    w = imaging.expected_spot_radius(100e-9, cfg.psf_radius)
    err = abs(fit.params[3] / w - 1)
    ok = abs(flux - 1) < 1e-3 and err < 2e-3 and not img.truncated
    return "rendered flux and fitted radius", ok, f"flux {flux:.5f}, radius err {err:.1e}"


def check_trajectory_determinism():
    trap = physcore.TrapConfig()
    laser = physcore.LaserConfig()
    noise = physcore.NoiseDriveConfig(force_psd=1e-45)
    ion = physcore.IonSpecies()
    dt = dynamics.max_timestep(trap)
    start = dynamics.MotionState((1e-7, 0.0), (0.0, 0.1))
    a = dynamics.simulate_trajectory(start, trap, laser, noise, ion, 2e-5, dt, seed=5)
    b = dynamics.simulate_trajectory(start, trap, laser, noise, ion, 2e-5, dt, seed=5)
    ok = np.array_equal(a.position, b.position) and np.array_equal(a.velocity, b.velocity)
    return "trajectory determinism", ok, f"{len(a)} samples"


def check_deconvolution_clamp():
    v, c = thermometry.variance_deconvolve(373e-9, 373e-9)
    v2, c2 = thermometry.variance_deconvolve(373e-9, 249e-9)
    ok = v == 0 and c and not c2 and abs(v2 - 1.9282e-14) < 1e-18
    return "deconvolution clamp", ok, f"{v2:.5e} m^2"


CHECKS = (check_diffraction_monotone, check_validate_idempotent, check_gauss2d_jacobian,
          check_spectrum_jacobian, check_voigt_round_trip, check_mode_ratios, check_flux_and_radius,
          check_trajectory_determinism, check_deconvolution_clamp)


def run_selftest(stream=None):
    """Run every check; print one line each to ``stream``; return True if all pass."""
    all_ok = True
    for check in CHECKS:
        try:
            name, ok, detail = check()
        except Exception as exc:  # a crashing check is a failed check
            name, ok, detail = check.__name__, False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        if stream is not None:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""), file=stream)
    return all_ok
