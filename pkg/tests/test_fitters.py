import dataclasses
import math

import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings
from hypothesis import strategies as st

from iontherm.fitters import (GAUSS2D_NAMES, FlatImageError, Gauss2DParams, InsufficientSpanError,
                              RankDeficiencyError, SpectrumParams, SpectrumScan, fit_ion_image, fit_spectrum,
                              gauss2d_model, gauss2d_pixel_model, least_squares, spectrum_model)
from iontherm.imaging import IonImage, expected_spot_radius, render_image
from iontherm.physcore import ImagingConfig


def central_diff(f, p, h_rel=1e-6):
    p = np.asarray(p, dtype=float)
    cols = []
    for j in range(p.size):
        h = h_rel * max(abs(p[j]), 1.0)
        up, dn = p.copy(), p.copy()
        up[j] += h
        dn[j] -= h
        cols.append((f(up) - f(dn)) / (2 * h))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------

def _decay_problem():
    rng = np.random.default_rng(0)
    t = np.linspace(0, 5, 60)
    y = 3.0 * np.exp(-1.3 * t) + 0.4 + rng.normal(0, 0.02, t.size)

    def fun(p):
        e = np.exp(-p[1] * t)
        return p[0] * e + p[2] - y, np.column_stack([e, -p[0] * t * e, np.ones_like(t)])
    return fun


def test_lm_matches_scipy():
    fun = _decay_problem()
    ours = least_squares(fun, [1.0, 0.5, 0.0])
    ref = scipy.optimize.least_squares(lambda p: fun(p)[0], [1.0, 0.5, 0.0], jac=lambda p: fun(p)[1],
                                       method="lm", xtol=1e-14, ftol=1e-14)
    assert ours.converged
    assert np.allclose(ours.params, ref.x, rtol=1e-6)
    assert np.all(np.diff(ours.history) <= 1e-15)


def test_lm_linear_covariance_matches_regression():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(40), np.linspace(-1, 1, 40), np.linspace(-1, 1, 40) ** 2])
    y = X @ [1.0, -2.0, 0.5] + rng.normal(0, 0.1, 40)
    res = least_squares(lambda p: (X @ p - y, X), np.zeros(3))
    beta, rss, *_ = np.linalg.lstsq(X, y, rcond=None)
    cov = rss[0] / (40 - 3) * np.linalg.inv(X.T @ X)
    assert np.allclose(res.params, beta, rtol=1e-10)
    assert np.allclose(res.covariance, cov, rtol=1e-8)


def test_lm_rank_deficient():
    X = np.column_stack([np.ones(10), np.ones(10)])
    with pytest.raises(RankDeficiencyError):
        least_squares(lambda p: (X @ p - 1.0, X), np.zeros(2))
    assert issubclass(RankDeficiencyError, np.linalg.LinAlgError)


def test_lm_non_finite_start():
    with pytest.raises(ValueError):
        least_squares(lambda p: (np.array([np.nan, 1.0]), np.eye(2)), np.zeros(2))


def test_lm_max_iter_reports_unconverged():
    fun = _decay_problem()
    res = least_squares(fun, [1.0, 0.5, 0.0], max_iter=1)
    assert not res.converged and res.iterations == 1


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.floats(1, 100), st.floats(-1, 1), st.floats(-1, 1), st.floats(0.5, 3), st.floats(0.5, 3),
       st.floats(-85, 85), st.floats(0, 10))
def test_gauss2d_jacobian(a, x0, y0, wx, wy, phi, b):
    p = np.array([a, x0, y0, wx, wy, phi, b])
    x, y = np.meshgrid(np.linspace(-2, 2, 7), np.linspace(-2, 2, 7))
    _, J = gauss2d_model(p, x.ravel(), y.ravel())
    Jn = central_diff(lambda q: gauss2d_model(q, x.ravel(), y.ravel())[0], p)
    assert np.max(np.abs(J - Jn)) <= 1e-5 * np.max(np.abs(Jn))


@settings(max_examples=20, deadline=None)
@given(st.floats(1, 100), st.floats(-1, 1), st.floats(-1, 1), st.floats(1, 3), st.floats(1, 3), st.floats(-85, 85))
def test_gauss2d_pixel_jacobian(a, x0, y0, wx, wy, phi):
    p = np.array([a, x0, y0, wx, wy, phi, 1.0])
    x, y = np.meshgrid(np.linspace(-2, 2, 5), np.linspace(-2, 2, 5))
    _, J = gauss2d_pixel_model(p, x.ravel(), y.ravel(), 1.0)
    Jn = central_diff(lambda q: gauss2d_pixel_model(q, x.ravel(), y.ravel(), 1.0)[0], p)
    assert np.max(np.abs(J - Jn)) <= 1e-5 * np.max(np.abs(Jn))


@settings(max_examples=40, deadline=None)
@given(st.floats(10, 1000), st.floats(-5, 5), st.floats(5, 40), st.floats(0.5, 5), st.floats(0, 2),
       st.booleans())
def test_spectrum_jacobian(a, nu0, gt, dl, b, literal):
    p = np.array([a, nu0, gt, dl, b])
    nu = np.linspace(-60, 20, 41)
    _, J = spectrum_model(p, nu, literal)
    Jn = central_diff(lambda q: spectrum_model(q, nu, literal)[0], p)
    assert np.all(np.abs(J - Jn) <= 1e-5 * (np.abs(Jn).max(axis=0) + 1e-300))


def test_pixel_model_tends_to_point_model():
    p = np.array([5.0, 0.1, -0.2, 2.0, 1.5, 20.0, 0.3])
    x, y = np.linspace(-2, 2, 9), np.linspace(-1, 1, 9)
    fine, _ = gauss2d_pixel_model(p, x, y, 1e-4)
    point, _ = gauss2d_model(p, x, y)
    assert np.allclose(fine, point, rtol=1e-8)


# ---------------------------------------------------------------------------
# image fits
# ---------------------------------------------------------------------------

IM = dataclasses.replace(ImagingConfig(), width=64, height=64)


def test_noiseless_fit_is_exact():
    img = render_image(80e-9, 50e-9, 0.0, IM, 1e5, noise=False)
    fit = fit_ion_image(img)
    assert fit.converged and fit.names == GAUSS2D_NAMES
    assert fit.params[3] == pytest.approx(float(expected_spot_radius(80e-9, IM.psf_radius)), rel=1e-9)
    assert fit.params[4] == pytest.approx(float(expected_spot_radius(50e-9, IM.psf_radius)), rel=1e-9)
    assert isinstance(fit.model, Gauss2DParams)


def test_fit_translation_equivariance():
    p = IM.pixel_pitch
    a = fit_ion_image(render_image(60e-9, 60e-9, 0.0, IM, 1e5, noise=False, center=(30 * p, 31 * p)))
    b = fit_ion_image(render_image(60e-9, 60e-9, 0.0, IM, 1e5, noise=False, center=(35 * p, 28 * p)))
    assert b.params[1] - a.params[1] == pytest.approx(5 * p, rel=1e-8)
    assert b.params[2] - a.params[2] == pytest.approx(-3 * p, rel=1e-8)
    assert np.allclose(a.params[3:5], b.params[3:5], rtol=1e-8)


def test_fit_count_scaling_invariance():
    img = render_image(60e-9, 90e-9, 0.0, IM, 1e4, seed=4)
    scaled = dataclasses.replace(img, counts=img.counts * 7)
    a, b = fit_ion_image(img), fit_ion_image(scaled)
    assert np.allclose(a.params[1:6], b.params[1:6], rtol=1e-6)
    assert b.params[0] == pytest.approx(7 * a.params[0], rel=1e-6)


def test_fit_pitch_scaling():
    img = render_image(60e-9, 90e-9, 0.0, IM, 1e4, seed=4)
    a = fit_ion_image(img)
    b = fit_ion_image(dataclasses.replace(img, pixel_pitch=2 * img.pixel_pitch))
    assert np.allclose(b.params[1:5], 2 * a.params[1:5], rtol=1e-8)


@pytest.mark.parametrize("angle", [-60.0, -20.0, 30.0, 75.0])
def test_rotation_fit(angle):
    img = render_image(200e-9, 40e-9, angle, IM, 1e5, noise=False)
    fit = fit_ion_image(img, fit_rotation=True)
    major = float(expected_spot_radius(200e-9, IM.psf_radius))
    minor = float(expected_spot_radius(40e-9, IM.psf_radius))
    w = sorted(fit.params[3:5])
    assert w == pytest.approx([minor, major], rel=1e-6)
    major_dir = fit.params[5] if fit.params[3] > fit.params[4] else fit.params[5] + 90.0
    assert ((major_dir - angle + 90) % 180) - 90 == pytest.approx(0.0, abs=1e-4)


def test_flat_image():
    with pytest.raises(FlatImageError):
        fit_ion_image(IonImage(np.full((16, 16), 3), 1e-8))


def test_covariance_options():
    img = render_image(60e-9, 60e-9, 0.0, IM, 1e4, seed=1)
    shot = fit_ion_image(img)
    resid = fit_ion_image(img, covariance="residual")
    assert np.allclose(shot.params, resid.params)
    assert shot.errors[3] > 0 and resid.errors[3] > 0
    with pytest.raises(ValueError):
        fit_ion_image(img, covariance="bogus")


def test_shot_noise_errors_match_scatter():
    widths, errs = [], []
    for s in range(60):
        fit = fit_ion_image(render_image(60e-9, 60e-9, 0.0, IM, 1e4, seed=100 + s))
        widths.append(fit.params[3])
        errs.append(fit.errors[3])
    ratio = np.std(widths, ddof=1) / np.mean(errs)
    assert 0.7 < ratio < 1.4


def test_fit_result_text():
    fit = fit_ion_image(render_image(60e-9, 60e-9, 0.0, IM, 1e5, noise=False))
    text = fit.to_text().splitlines()
    assert text[0].startswith("amplitude ") and text[-1] == "converged 1"


# ---------------------------------------------------------------------------
# spectrum fits
# ---------------------------------------------------------------------------

TRUE = SpectrumParams(amplitude=2e5 * (10e6) ** 2, nu0=-1e6, gamma_t=25e6, laser_linewidth=1.5e6, offset=50.0)


def _scan(params=TRUE, lo=-90e6, hi=10e6, n=51):
    nu = np.linspace(lo, hi, n)
    return SpectrumScan(nu, spectrum_model(params, nu)[0], 1e-3)


def test_spectrum_fit_recovers_parameters():
    fit = fit_spectrum(_scan(), laser_linewidth=1e6)
    assert fit.converged
    assert np.allclose(fit.params, TRUE.as_array(), rtol=1e-6)


def test_spectrum_fit_fixed_linewidth():
    fit = fit_spectrum(_scan(), laser_linewidth=TRUE.laser_linewidth, fix_linewidth=True)
    assert fit.params[3] == TRUE.laser_linewidth and fit.errors[3] == 0.0
    assert fit.params[2] == pytest.approx(TRUE.gamma_t, rel=1e-6)
    with pytest.raises(ValueError):
        fit_spectrum(_scan(), fix_linewidth=True)


def test_spectrum_fit_poisson_weights():
    rng = np.random.default_rng(3)
    scan = _scan()
    noisy = SpectrumScan(scan.detuning_hz, rng.poisson(scan.rate * 1e-3) / 1e-3, 1e-3)
    fit = fit_spectrum(noisy, laser_linewidth=TRUE.laser_linewidth, fix_linewidth=True, weights="poisson")
    assert abs(fit.params[2] - TRUE.gamma_t) < 4 * fit.errors[2]


def test_spectrum_span_errors():
    with pytest.raises(InsufficientSpanError):
        fit_spectrum(_scan(n=6))
    with pytest.raises(InsufficientSpanError):
        fit_spectrum(_scan(lo=-90e6, hi=-20e6, n=30))  # never reaches the blue cutoff


def test_literal_step_goes_negative():
    nu = np.linspace(-40e6, 40e6, 9)
    vals, _ = spectrum_model(TRUE, nu, literal=True)
    assert vals.min() < TRUE.offset
    vals, _ = spectrum_model(TRUE, nu)
    assert vals.min() >= TRUE.offset


def test_scan_csv_round_trip(tmp_path):
    scan = _scan()
    scan.to_csv(tmp_path / "s.csv")
    back = SpectrumScan.from_csv(tmp_path / "s.csv")
    assert np.allclose(back.detuning_hz, scan.detuning_hz, rtol=1e-9)
    assert np.allclose(back.rate, scan.rate, rtol=1e-9)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        SpectrumScan.from_csv(tmp_path / "bad.csv")
